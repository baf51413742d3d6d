use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::Rng;

use super::conv::{conv_backward, conv_forward, flatten_depth, unflatten_depth, ConvLayerParams, Padding};
use super::lstm::{lstm_backward, lstm_forward, Gate, LstmCache, LstmLayerParams};
use crate::error::{Error, Result};
use crate::pipeline::PostureLabel;
use crate::rng::{self, Purpose};

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Network shape `C(kernels)×conv_layers − RL(hidden)×lstm_layers − Sm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub steps: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: Padding,
    pub lstm_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Architecture {
    /// Full-scale defaults for 1 s windows at 40 Hz over 30 channels.
    pub fn full_size(conv_layers: usize) -> Self {
        Architecture {
            steps: 40,
            channels: 30,
            conv_layers,
            kernels: 64,
            kernel_h: 5,
            kernel_w: 30,
            padding: Padding::Same,
            lstm_layers: 2,
            hidden: 128,
            dropout: 0.5,
        }
    }

    /// Short name such as `C1L2`.
    pub fn descriptor(&self) -> String {
        format!("C{}L{}", self.conv_layers, self.lstm_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.conv_layers) {
            return Err(Error::invalid(format!("conv layers must be in 1..=5, got {}", self.conv_layers)));
        }
        if self.lstm_layers == 0 || self.hidden == 0 || self.kernels == 0 {
            return Err(Error::invalid("lstm layers, hidden units and kernels must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::invalid("kernel size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        self.feature_dims().map(|_| ())
    }

    /// `(time, width)` after the convolution stack.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let (mut s, mut w) = (self.steps, self.channels);
        for _ in 0..self.conv_layers {
            match (
                self.padding.output_len(s, self.kernel_h),
                self.padding.output_len(w, self.kernel_w),
            ) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (s, w) = (a, b),
                _ => return Err(Error::invalid("kernel does not fit the feature map")),
            }
        }
        Ok((s, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Vec<ConvLayerParams>,
    pub lstm: Vec<LstmLayerParams>,
    /// `C × H`.
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
}

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl Params {
    pub fn zeros(arch: &Architecture, classes: usize) -> Result<Self> {
        arch.validate()?;
        let (_, w) = arch.feature_dims()?;
        let conv = (0..arch.conv_layers)
            .map(|l| {
                let depth = if l == 0 { 1 } else { arch.kernels };
                ConvLayerParams::zeros(arch.kernels, arch.kernel_h, arch.kernel_w, depth, arch.padding)
            })
            .collect();
        let lstm = (0..arch.lstm_layers)
            .map(|l| {
                let input = if l == 0 { w * arch.kernels } else { arch.hidden };
                LstmLayerParams::zeros(input, arch.hidden)
            })
            .collect();
        Ok(Params {
            conv,
            lstm,
            dense_w: Array2::zeros((classes, arch.hidden)),
            dense_b: Array1::zeros(classes),
        })
    }

    /// Named tensors in declaration order.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (l, c) in self.conv.iter().enumerate() {
            out.push(ParamRef { name: format!("conv{l}.kernels"), shape: c.kernels.shape().to_vec(), data: c.kernels.as_slice().unwrap() });
            out.push(ParamRef { name: format!("conv{l}.biases"), shape: c.biases.shape().to_vec(), data: c.biases.as_slice().unwrap() });
        }
        for (l, p) in self.lstm.iter().enumerate() {
            for g in Gate::ALL {
                let gp = &p.gates[g as usize];
                let s = g.suffix();
                out.push(ParamRef { name: format!("lstm{l}.w_x{s}"), shape: gp.w_x.shape().to_vec(), data: gp.w_x.as_slice().unwrap() });
                out.push(ParamRef { name: format!("lstm{l}.w_h{s}"), shape: gp.w_h.shape().to_vec(), data: gp.w_h.as_slice().unwrap() });
                out.push(ParamRef { name: format!("lstm{l}.b_{s}"), shape: gp.b.shape().to_vec(), data: gp.b.as_slice().unwrap() });
            }
        }
        out.push(ParamRef { name: "dense.w".into(), shape: self.dense_w.shape().to_vec(), data: self.dense_w.as_slice().unwrap() });
        out.push(ParamRef { name: "dense.b".into(), shape: self.dense_b.shape().to_vec(), data: self.dense_b.as_slice().unwrap() });
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.conv {
            out.push(c.kernels.as_slice_mut().unwrap());
            out.push(c.biases.as_slice_mut().unwrap());
        }
        for p in &mut self.lstm {
            for gp in &mut p.gates {
                out.push(gp.w_x.as_slice_mut().unwrap());
                out.push(gp.w_h.as_slice_mut().unwrap());
                out.push(gp.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.dense_w.as_slice_mut().unwrap());
        out.push(self.dense_b.as_slice_mut().unwrap());
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active with a mask drawn from `seed`; activations cached.
    Train { seed: u64 },
    Infer,
}

#[derive(Debug, Clone)]
struct Cache {
    /// Input to each conv layer (layer 0 gets the image as depth 1).
    conv_inputs: Vec<Array3<f64>>,
    /// tanh output of the last conv layer.
    conv_out: Array3<f64>,
    lstm: Vec<LstmCache>,
    /// Inverted-dropout multipliers (0 or 1/keep).
    mask: Array1<f64>,
    dropped: Array1<f64>,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub probs: Array1<f64>,
    cache: Option<Cache>,
}

impl ForwardPass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClnModel {
    pub arch: Architecture,
    /// Softmax head order.
    pub classes: Vec<PostureLabel>,
    pub params: Params,
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &Array1<f64>, label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label index {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

impl ClnModel {
    /// Randomly initialized model: Glorot-uniform weights, zero biases.
    pub fn new(arch: Architecture, classes: Vec<PostureLabel>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut params = Params::zeros(&arch, classes.len())?;
        let (_, w) = arch.feature_dims()?;
        for (l, c) in params.conv.iter_mut().enumerate() {
            let mut r = rng::stream(seed, Purpose::Init, &[0, l as u64]);
            *c = ConvLayerParams::init(c.out_depth(), c.kernel_h, c.kernel_w, c.in_depth, c.padding, &mut r);
        }
        for (l, p) in params.lstm.iter_mut().enumerate() {
            let mut r = rng::stream(seed, Purpose::Init, &[1, l as u64]);
            let input = if l == 0 { w * arch.kernels } else { arch.hidden };
            *p = LstmLayerParams::init(input, arch.hidden, &mut r);
        }
        let mut r = rng::stream(seed, Purpose::Init, &[2]);
        let limit = dense_limit(arch.hidden, classes.len());
        params.dense_w.mapv_inplace(|_| r.gen_range(-limit..=limit));
        Ok(ClnModel { arch, classes, params })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: PostureLabel) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Copy of this model whose head covers `self.classes ∪ extra`, in
    /// canonical label order. Existing rows are copied; new rows are drawn
    /// from the Glorot range.
    pub fn with_classes(&self, extra: &[PostureLabel], seed: u64) -> ClnModel {
        let mut classes = self.classes.clone();
        for &l in extra {
            if !classes.contains(&l) {
                classes.push(l);
            }
        }
        classes.sort();
        if classes == self.classes {
            return self.clone();
        }
        let h = self.arch.hidden;
        let limit = dense_limit(h, classes.len());
        let mut w = Array2::zeros((classes.len(), h));
        let mut b = Array1::zeros(classes.len());
        for (row, &l) in classes.iter().enumerate() {
            match self.class_index(l) {
                Some(old) => {
                    w.row_mut(row).assign(&self.params.dense_w.row(old));
                    b[row] = self.params.dense_b[old];
                }
                None => {
                    let mut r = rng::stream(seed, Purpose::HeadGrowth, &[l.index() as u64]);
                    w.row_mut(row).mapv_inplace(|_| r.gen_range(-limit..=limit));
                }
            }
        }
        let mut m = self.clone();
        m.classes = classes;
        m.params.dense_w = w;
        m.params.dense_b = b;
        m
    }

    /// `[conv → tanh]×N → flatten → LSTM×L → dropout → dense → softmax` on
    /// the final step's hidden vector.
    pub fn forward(&self, image: ArrayView2<f64>, mode: Mode) -> Result<ForwardPass> {
        let (s, d) = image.dim();
        if (s, d) != (self.arch.steps, self.arch.channels) {
            return Err(Error::invalid(format!(
                "image is {s}x{d}, model expects {}x{}",
                self.arch.steps, self.arch.channels
            )));
        }
        let train = matches!(mode, Mode::Train { .. });
        let mut conv_inputs = Vec::with_capacity(self.params.conv.len());
        let mut a = image.to_owned().into_shape_with_order((s, d, 1)).unwrap();
        for layer in &self.params.conv {
            let z = conv_forward(a.view(), layer)?;
            let next = z.mapv(f64::tanh);
            if train {
                conv_inputs.push(std::mem::replace(&mut a, next));
            } else {
                a = next;
            }
        }
        let conv_out = a;
        let mut seq = flatten_depth(conv_out.clone());
        let mut caches = Vec::with_capacity(self.params.lstm.len());
        for layer in &self.params.lstm {
            let cache = lstm_forward(seq, layer)?;
            seq = cache.h.clone();
            caches.push(cache);
        }
        let last = seq.row(seq.nrows() - 1).to_owned();
        let hidden = last.len();
        let mask = match mode {
            Mode::Train { seed } if self.arch.dropout > 0.0 => {
                let keep = 1.0 - self.arch.dropout;
                let mut r = rng::stream(seed, Purpose::Dropout, &[]);
                Array1::from_shape_fn(hidden, |_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            }
            _ => Array1::ones(hidden),
        };
        let dropped = &last * &mask;
        let logits = self.params.dense_w.dot(&dropped) + &self.params.dense_b;
        let probs = softmax(&logits);
        let cache = train.then(|| Cache { conv_inputs, conv_out, lstm: caches, mask, dropped });
        Ok(ForwardPass { probs, cache })
    }

    pub fn predict_proba(&self, image: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(image, Mode::Infer)?.probs)
    }

    /// Head index with the highest probability (lowest index on ties).
    pub fn predict_index(&self, image: ArrayView2<f64>) -> Result<usize> {
        let p = self.predict_proba(image)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Exact gradient of `cross_entropy(forward(image), label)` for the
    /// dropout mask fixed in `pass`.
    pub fn backward(&self, pass: &ForwardPass, label: usize) -> Result<Params> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("backward needs a train-mode forward pass"))?;
        if label >= self.class_count() {
            return Err(Error::invalid(format!("label index {label} out of range")));
        }
        let mut grads = self.params.zeros_like();
        let mut dlogits = pass.probs.clone();
        if pass.probs[label] < PROB_FLOOR {
            // Loss is the constant -ln(floor) here.
            dlogits.fill(0.0);
        } else {
            dlogits[label] -= 1.0;
        }
        grads.dense_w = Array2::from_shape_fn(self.params.dense_w.dim(), |(c, h)| dlogits[c] * cache.dropped[h]);
        grads.dense_b = dlogits.clone();
        let d_last = self.params.dense_w.t().dot(&dlogits) * &cache.mask;

        let steps = cache.lstm[0].h.nrows();
        let mut dh = Array2::zeros((steps, self.arch.hidden));
        dh.row_mut(steps - 1).assign(&d_last);
        for l in (0..self.params.lstm.len()).rev() {
            let (g, dx) = lstm_backward(&cache.lstm[l], &self.params.lstm[l], dh.view());
            grads.lstm[l] = g;
            dh = dx;
        }
        let width = cache.conv_out.dim().1;
        let mut da = unflatten_depth(dh, width);
        let mut out = cache.conv_out.view().to_owned();
        for l in (0..self.params.conv.len()).rev() {
            // tanh'(z) = 1 - a².
            let dz = &da * &out.mapv(|v| 1.0 - v * v);
            let input = &cache.conv_inputs[l];
            let (g, dx) = conv_backward(input.view(), &self.params.conv[l], &dz, l > 0);
            grads.conv[l].kernels = g.kernels;
            grads.conv[l].biases = g.biases;
            if let Some(dx) = dx {
                da = dx;
                out = input.clone();
            }
        }
        Ok(grads)
    }

    /// Forward + backward for one example; returns `(loss, grads)`.
    pub fn loss_and_grad(&self, image: ArrayView2<f64>, label: usize, seed: u64) -> Result<(f64, Params)> {
        let pass = self.forward(image, Mode::Train { seed })?;
        let loss = cross_entropy(&pass.probs, label)?;
        Ok((loss, self.backward(&pass, label)?))
    }

    pub fn loss(&self, image: ArrayView2<f64>, label: usize, mode: Mode) -> Result<f64> {
        cross_entropy(&self.forward(image, mode)?.probs, label)
    }
}

fn dense_limit(hidden: usize, classes: usize) -> f64 {
    (6.0 / (hidden + classes) as f64).sqrt()
}
