//! 2-D convolution over `(time, width, depth)` tensors, stride 1.
//!
//! Implemented as cross-correlation via im2col: each output position gathers
//! a `kh × kw × depth` patch (zeros outside the input), and the patch matrix
//! is multiplied by the kernel matrix. Patch columns are ordered
//! `(row offset, column offset, depth)` with depth fastest, matching the
//! kernel layout.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// `Same` pads `(k-1)/2` before and `k-1-(k-1)/2` after along each axis so
/// the output keeps the input's `(time, width)`; `Valid` does not pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Result<Padding> {
        match s.trim().to_ascii_lowercase().as_str() {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::invalid(format!("unknown padding {other:?}"))),
        }
    }

    fn before(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output extent along one axis.
    pub fn output_len(self, input: usize, k: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(input),
            Padding::Valid => input.checked_sub(k).map(|d| d + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams {
    /// `K × (kh·kw·in_depth)`.
    pub kernels: Array2<f64>,
    pub biases: Array1<f64>,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_depth: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub kernels: Array2<f64>,
    pub biases: Array1<f64>,
}

impl ConvLayerParams {
    pub fn zeros(kernels: usize, kernel_h: usize, kernel_w: usize, in_depth: usize, padding: Padding) -> Self {
        ConvLayerParams {
            kernels: Array2::zeros((kernels, kernel_h * kernel_w * in_depth)),
            biases: Array1::zeros(kernels),
            kernel_h,
            kernel_w,
            in_depth,
            padding,
        }
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init<R: Rng>(kernels: usize, kernel_h: usize, kernel_w: usize, in_depth: usize, padding: Padding, rng: &mut R) -> Self {
        let mut p = Self::zeros(kernels, kernel_h, kernel_w, in_depth, padding);
        let area = (kernel_h * kernel_w) as f64;
        let limit = (6.0 / (area * in_depth as f64 + area * kernels as f64)).sqrt();
        p.kernels.mapv_inplace(|_| rng.gen_range(-limit..=limit));
        p
    }

    pub fn out_depth(&self) -> usize {
        self.kernels.nrows()
    }

    /// Output `(time, width)` for an input of `(time, width)`.
    pub fn output_dims(&self, s: usize, w: usize) -> Result<(usize, usize)> {
        match (
            self.padding.output_len(s, self.kernel_h),
            self.padding.output_len(w, self.kernel_w),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => Err(Error::invalid(format!(
                "{}x{} kernel does not fit a {s}x{w} input without padding",
                self.kernel_h, self.kernel_w
            ))),
        }
    }
}

fn im2col(x: ArrayView3<f64>, p: &ConvLayerParams, out: (usize, usize)) -> Array2<f64> {
    let (s, w, d) = x.dim();
    let (kh, kw) = (p.kernel_h, p.kernel_w);
    let (pt, pl) = (p.padding.before(kh), p.padding.before(kw));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let cols = kh * kw * d;
    let mut patches = Array2::zeros((out.0 * out.1, cols));
    for (row, mut dst) in patches.axis_iter_mut(Axis(0)).enumerate() {
        let (os, ow) = (row / out.1, row % out.1);
        let dst = dst.as_slice_mut().unwrap();
        for i in 0..kh {
            let si = os + i;
            if si < pt || si - pt >= s {
                continue;
            }
            let si = si - pt;
            // Contiguous run of valid width offsets for this kernel row.
            let j0 = pl.saturating_sub(ow);
            let j1 = kw.min(w + pl - ow);
            if j0 >= j1 {
                continue;
            }
            let wi = ow + j0 - pl;
            let src = &xs[(si * w + wi) * d..(si * w + wi + (j1 - j0)) * d];
            dst[(i * kw + j0) * d..(i * kw + j1) * d].copy_from_slice(src);
        }
    }
    patches
}

fn col2im(dpatches: &Array2<f64>, p: &ConvLayerParams, input: (usize, usize, usize), out: (usize, usize)) -> Array3<f64> {
    let (s, w, d) = input;
    let (kh, kw) = (p.kernel_h, p.kernel_w);
    let (pt, pl) = (p.padding.before(kh), p.padding.before(kw));
    let mut dx = vec![0.0; s * w * d];
    for (row, src) in dpatches.axis_iter(Axis(0)).enumerate() {
        let (os, ow) = (row / out.1, row % out.1);
        let src = src.as_slice().unwrap();
        for i in 0..kh {
            let si = os + i;
            if si < pt || si - pt >= s {
                continue;
            }
            let si = si - pt;
            let j0 = pl.saturating_sub(ow);
            let j1 = kw.min(w + pl - ow);
            if j0 >= j1 {
                continue;
            }
            let wi = ow + j0 - pl;
            let dst = &mut dx[(si * w + wi) * d..(si * w + wi + (j1 - j0)) * d];
            for (a, b) in dst.iter_mut().zip(&src[(i * kw + j0) * d..(i * kw + j1) * d]) {
                *a += b;
            }
        }
    }
    Array3::from_shape_vec((s, w, d), dx).unwrap()
}

/// Cross-correlation plus per-kernel bias.
pub fn conv_forward(x: ArrayView3<f64>, p: &ConvLayerParams) -> Result<Array3<f64>> {
    let (s, w, d) = x.dim();
    if d != p.in_depth {
        return Err(Error::invalid(format!("input depth {d} does not match kernel depth {}", p.in_depth)));
    }
    let out = p.output_dims(s, w)?;
    let patches = im2col(x, p, out);
    let mut y = patches.dot(&p.kernels.t());
    y += &p.biases;
    Ok(y.into_shape_with_order((out.0, out.1, p.out_depth())).unwrap())
}

/// Gradients of a loss w.r.t. kernels, biases and (optionally) the input,
/// given the loss gradient `dy` at the convolution output.
pub fn conv_backward(
    x: ArrayView3<f64>,
    p: &ConvLayerParams,
    dy: &Array3<f64>,
    want_input_grad: bool,
) -> (ConvGrads, Option<Array3<f64>>) {
    let (s, w, _) = x.dim();
    let out = (dy.dim().0, dy.dim().1);
    let patches = im2col(x, p, out);
    let dy2 = dy
        .view()
        .into_shape_with_order((out.0 * out.1, p.out_depth()))
        .unwrap();
    let grads = ConvGrads { kernels: dy2.t().dot(&patches), biases: dy2.sum_axis(Axis(0)) };
    let dx = want_input_grad.then(|| {
        let dpatches = dy2.dot(&p.kernels);
        col2im(&dpatches, p, (s, w, p.in_depth), out)
    });
    (grads, dx)
}

pub fn tanh_activation(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(f64::tanh)
}

/// Per-step feature vectors: `(S, W, K)` → `S × (W·K)`, index `w·K + k`.
pub fn flatten_depth(x: Array3<f64>) -> Array2<f64> {
    let (s, w, k) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((s, w * k))
        .unwrap()
}

/// Inverse of [`flatten_depth`].
pub fn unflatten_depth(x: Array2<f64>, width: usize) -> Array3<f64> {
    let (s, f) = x.dim();
    assert_eq!(f % width, 0, "feature count {f} is not a multiple of width {width}");
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((s, width, f / width))
        .unwrap()
}
