//! Binary container shared by checkpoints and dataset archives.
//!
//! ```text
//! <magic>\n
//! version=1\n
//! key=value\n            (metadata, insertion order)
//! tensor <name> <f32|f64> <d0>x<d1>...\n
//! end\n
//! <little-endian IEEE-754 payload, tensors in declaration order>
//! ```
//!
//! The whole file is validated before anything is returned, so a truncated
//! or padded file never produces a partial object.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

/// First 8 bytes of the SHA-256 of `text`, as hex.
pub fn short_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value;
        } else {
            self.meta.push((key.to_string(), value));
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(format!("missing header key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: DType, shape: &[usize], values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(Tensor { name: name.into(), dtype, shape: shape.to_vec(), values });
    }

    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("missing tensor {name:?}")))?;
        let t = self.tensors.remove(pos);
        if t.shape != shape {
            return Err(Error::format(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t.values)
    }

    pub fn write<W: Write>(&self, magic: &str, mut out: W) -> std::io::Result<()> {
        let mut header = format!("{magic}\nversion={VERSION}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} {} {}\n", t.name, t.dtype.name(), dims.join("x")));
        }
        header.push_str("end\n");
        out.write_all(header.as_bytes())?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            buf.reserve(t.values.len() * t.dtype.width());
            for &v in &t.values {
                match t.dtype {
                    DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
            out.write_all(&buf)?;
        }
        out.flush()
    }

    pub fn read<R: Read>(magic: &str, mut input: R) -> Result<Container> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::format(format!("read failed: {e}")))?;
        Self::from_bytes(magic, &bytes)
    }

    pub fn from_bytes(magic: &str, bytes: &[u8]) -> Result<Container> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::format("header is not utf-8"))?;
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != magic {
            return Err(Error::format(format!("not a {magic} file")));
        }
        let version = next_line()?;
        if version != format!("version={VERSION}") {
            return Err(Error::format(format!("unsupported {version:?}")));
        }
        let mut c = Container::default();
        let mut specs = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::format(format!("bad tensor line {line:?}")));
                }
                let dtype = match parts[1] {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    other => return Err(Error::format(format!("unknown dtype {other:?}"))),
                };
                let shape = parts[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(format!("bad shape in {line:?}")))?;
                specs.push((parts[0].to_string(), dtype, shape));
            } else if let Some((k, v)) = line.split_once('=') {
                c.meta.push((k.to_string(), v.to_string()));
            } else {
                return Err(Error::format(format!("bad header line {line:?}")));
            }
        }
        let need: usize = specs
            .iter()
            .map(|(_, d, s)| s.iter().product::<usize>() * d.width())
            .sum();
        let payload = &bytes[pos..];
        if payload.len() != need {
            return Err(Error::format(format!(
                "payload is {} bytes, header declares {need}",
                payload.len()
            )));
        }
        let mut off = 0;
        for (name, dtype, shape) in specs {
            let n: usize = shape.iter().product();
            let w = dtype.width();
            let values = payload[off..off + n * w]
                .chunks_exact(w)
                .map(|b| match dtype {
                    DType::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    DType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                })
                .collect();
            off += n * w;
            c.tensors.push(Tensor { name, dtype, shape, values });
        }
        Ok(c)
    }
}
