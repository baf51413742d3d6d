use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use ndarray::Array2;

use super::label::PostureLabel;
use crate::container::{Container, DType};
use crate::error::{Error, Result};

const MAGIC: &str = "CLN-DATASET";

/// One normalized S×D window and its majority label.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionImage {
    pub data: Array2<f64>,
    pub label: PostureLabel,
    /// Timestamp of the first record in the window, seconds.
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub subject: String,
    pub steps: usize,
    pub channels: usize,
    pub images: Vec<MotionImage>,
}

impl LabeledDataset {
    pub fn new(subject: impl Into<String>, steps: usize, channels: usize) -> Self {
        LabeledDataset { subject: subject.into(), steps, channels, images: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn histogram(&self) -> BTreeMap<PostureLabel, usize> {
        let mut h = BTreeMap::new();
        for img in &self.images {
            *h.entry(img.label).or_insert(0) += 1;
        }
        h
    }

    /// Labels present, in canonical order.
    pub fn classes(&self) -> Vec<PostureLabel> {
        self.histogram().into_keys().collect()
    }

    /// Sub-dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            subject: self.subject.clone(),
            steps: self.steps,
            channels: self.channels,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn push(&mut self, img: MotionImage) -> Result<()> {
        if img.data.dim() != (self.steps, self.channels) {
            return Err(Error::invalid(format!(
                "image is {:?}, dataset expects ({}, {})",
                img.data.dim(),
                self.steps,
                self.channels
            )));
        }
        self.images.push(img);
        Ok(())
    }
}

/// Concatenates datasets in order, dropping images whose label is listed.
pub fn merge_generalized(
    datasets: &[LabeledDataset],
    drop_labels: &BTreeSet<PostureLabel>,
) -> Result<LabeledDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::invalid("nothing to merge"))?;
    let mut out = LabeledDataset::new(
        datasets.iter().map(|d| d.subject.as_str()).collect::<Vec<_>>().join("+"),
        first.steps,
        first.channels,
    );
    for d in datasets {
        if (d.steps, d.channels) != (first.steps, first.channels) {
            return Err(Error::invalid(format!(
                "subject {} has {}x{} windows, {} has {}x{}",
                d.subject, d.steps, d.channels, first.subject, first.steps, first.channels
            )));
        }
        out.images.extend(
            d.images
                .iter()
                .filter(|img| !drop_labels.contains(&img.label))
                .cloned(),
        );
    }
    Ok(out)
}

/// Writes a dataset archive: subject metadata, per-image labels and start
/// times, and the S×D grids as one `n×S×D` f64 tensor.
pub fn write_dataset<W: Write>(ds: &LabeledDataset, extra: &[(String, String)], out: W) -> std::io::Result<()> {
    let mut c = Container::default();
    c.set("subject", &ds.subject);
    c.set("steps", ds.steps);
    c.set("channels", ds.channels);
    c.set("images", ds.len());
    for (k, v) in extra {
        c.set(k, v);
    }
    c.set(
        "labels",
        ds.images.iter().map(|i| i.label.code()).collect::<Vec<_>>().join(","),
    );
    c.push("start", DType::F64, &[ds.len()], ds.images.iter().map(|i| i.start).collect());
    let mut grid = Vec::with_capacity(ds.len() * ds.steps * ds.channels);
    for img in &ds.images {
        grid.extend(img.data.iter().copied());
    }
    c.push("data", DType::F64, &[ds.len(), ds.steps, ds.channels], grid);
    c.write(MAGIC, out)
}

/// Reads a dataset archive, returning the dataset and its metadata.
pub fn read_dataset<R: Read>(input: R) -> Result<(LabeledDataset, Container)> {
    let mut c = Container::read(MAGIC, input)?;
    let steps: usize = c.parse("steps")?;
    let channels: usize = c.parse("channels")?;
    let n: usize = c.parse("images")?;
    let labels: Vec<PostureLabel> = if n == 0 {
        Vec::new()
    } else {
        c.get("labels")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::format(format!("bad label {s:?}"))))
            .collect::<Result<_>>()?
    };
    if labels.len() != n {
        return Err(Error::format("label count does not match image count"));
    }
    let start = c.take("start", &[n])?;
    let data = c.take("data", &[n, steps, channels])?;
    let images = data
        .chunks_exact((steps * channels).max(1))
        .take(n)
        .zip(labels)
        .zip(start)
        .map(|((grid, label), start)| MotionImage {
            data: Array2::from_shape_vec((steps, channels), grid.to_vec()).unwrap(),
            label,
            start,
        })
        .collect();
    let ds = LabeledDataset { subject: c.get("subject")?.to_string(), steps, channels, images };
    Ok((ds, c))
}
