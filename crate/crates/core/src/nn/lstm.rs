//! LSTM layer with explicit per-gate parameters.
//!
//! ```text
//! f_t = σ(W_xf x_t + W_hf h_{t-1} + b_f)
//! i_t = σ(W_xi x_t + W_hi h_{t-1} + b_i)
//! c̃_t = tanh(W_xc x_t + W_hc h_{t-1} + b_c)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ c̃_t
//! o_t = σ(W_xo x_t + W_ho h_{t-1} + b_o)
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//! σ is the logistic function. State starts at zero for every window.

use ndarray::linalg::general_mat_vec_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Gate order used for every per-gate array: forget, input, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Candidate = 2,
    Output = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Candidate, Gate::Output];

    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Forget => "f",
            Gate::Input => "i",
            Gate::Candidate => "c",
            Gate::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `H × input`.
    pub w_x: Array2<f64>,
    /// `H × H`.
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub gates: [GateParams; 4],
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let g = || GateParams {
            w_x: Array2::zeros((hidden, input)),
            w_h: Array2::zeros((hidden, hidden)),
            b: Array1::zeros(hidden),
        };
        LstmLayerParams { gates: [g(), g(), g(), g()] }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let lx = (6.0 / (input + hidden) as f64).sqrt();
        let lh = (6.0 / (2 * hidden) as f64).sqrt();
        for g in &mut p.gates {
            g.w_x.mapv_inplace(|_| rng.gen_range(-lx..=lx));
            g.w_h.mapv_inplace(|_| rng.gen_range(-lh..=lh));
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.gates[0].b.len()
    }

    pub fn input(&self) -> usize {
        self.gates[0].w_x.ncols()
    }

    pub fn gate(&self, g: Gate) -> &GateParams {
        &self.gates[g as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    /// Long-term memory.
    pub c: Array1<f64>,
    /// Short-term memory / output.
    pub h: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { c: Array1::zeros(hidden), h: Array1::zeros(hidden) }
    }
}

/// Gate activations of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateValues {
    pub f: Array1<f64>,
    pub i: Array1<f64>,
    pub c_tilde: Array1<f64>,
    pub o: Array1<f64>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the gate nonlinearities to pre-activations (in gate order) and
/// advances the cell. Shared by the single-step API and the layer loop.
fn cell(pre: [Array1<f64>; 4], c_prev: ArrayView1<f64>) -> (GateValues, Array1<f64>, Array1<f64>) {
    let [pf, pi, pc, po] = pre;
    let f = pf.mapv(sigmoid);
    let i = pi.mapv(sigmoid);
    let c_tilde = pc.mapv(f64::tanh);
    let o = po.mapv(sigmoid);
    let c = &f * &c_prev + &i * &c_tilde;
    let h = &o * &c.mapv(f64::tanh);
    (GateValues { f, i, c_tilde, o }, c, h)
}

/// One time step.
pub fn lstm_step(x_t: ArrayView1<f64>, prev: &LstmState, p: &LstmLayerParams) -> Result<(LstmState, GateValues)> {
    let hidden = p.hidden();
    if x_t.len() != p.input() || prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::invalid(format!(
            "lstm step expects input {} and state {hidden}, got input {} and state {}/{}",
            p.input(),
            x_t.len(),
            prev.h.len(),
            prev.c.len()
        )));
    }
    let pre = Gate::ALL.map(|g| {
        let gp = p.gate(g);
        gp.w_x.dot(&x_t) + gp.w_h.dot(&prev.h) + &gp.b
    });
    let (gates, c, h) = cell(pre, prev.c.view());
    Ok((LstmState { c, h }, gates))
}

/// Everything the backward pass needs from one layer's forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub input: Array2<f64>,
    /// Per-step gate activations, `S × 4H`, gate `g` in columns
    /// `g·H..(g+1)·H` (gate order f, i, c̃, o).
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    pub h: Array2<f64>,
}

impl LstmCache {
    pub fn gate(&self, g: Gate) -> ArrayView2<'_, f64> {
        let h = self.h.ncols();
        self.gates.slice(s![.., g as usize * h..(g as usize + 1) * h])
    }
}

/// `4H × input` and `4H × H` matrices with the gates stacked in order.
fn stacked(p: &LstmLayerParams) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let wx = ndarray::concatenate(Axis(0), &p.gates.each_ref().map(|g| g.w_x.view())).unwrap();
    let wh = ndarray::concatenate(Axis(0), &p.gates.each_ref().map(|g| g.w_h.view())).unwrap();
    let b = ndarray::concatenate(Axis(0), &p.gates.each_ref().map(|g| g.b.view())).unwrap();
    (wx, wh, b)
}

/// Runs a layer over an `S × input` sequence from zero state.
pub fn lstm_forward(x: Array2<f64>, p: &LstmLayerParams) -> Result<LstmCache> {
    let (steps, input) = x.dim();
    if input != p.input() {
        return Err(Error::invalid(format!("lstm expects {} features, got {input}", p.input())));
    }
    let hn = p.hidden();
    let (wx, wh, b) = stacked(p);
    // Input projections for all steps at once; recurrent terms added below.
    let mut pre = x.dot(&wx.t());
    pre += &b;
    let mut c_all = Array2::zeros((steps, hn));
    let mut h_all = Array2::zeros((steps, hn));
    let mut h_prev = Array1::<f64>::zeros(hn);
    let mut c_prev = Array1::<f64>::zeros(hn);
    for t in 0..steps {
        let mut row = pre.row_mut(t);
        if t > 0 {
            general_mat_vec_mul(1.0, &wh, &h_prev, 1.0, &mut row);
        }
        let a = row.as_slice_mut().unwrap();
        let (af, rest) = a.split_at_mut(hn);
        let (ai, rest) = rest.split_at_mut(hn);
        let (ac, ao) = rest.split_at_mut(hn);
        for k in 0..hn {
            af[k] = sigmoid(af[k]);
            ai[k] = sigmoid(ai[k]);
            ac[k] = ac[k].tanh();
            ao[k] = sigmoid(ao[k]);
            c_prev[k] = af[k] * c_prev[k] + ai[k] * ac[k];
            h_prev[k] = ao[k] * c_prev[k].tanh();
        }
        c_all.row_mut(t).assign(&c_prev);
        h_all.row_mut(t).assign(&h_prev);
    }
    Ok(LstmCache { input: x, gates: pre, c: c_all, h: h_all })
}

/// Backpropagation through time. `dh` is the loss gradient w.r.t. every
/// step's hidden output (`S × H`); returns parameter gradients and the
/// gradient w.r.t. the layer input (`S × input`).
pub fn lstm_backward(cache: &LstmCache, p: &LstmLayerParams, dh: ArrayView2<f64>) -> (LstmLayerParams, Array2<f64>) {
    let (steps, hn) = cache.h.dim();
    let (wx, wh, _) = stacked(p);
    // Pre-activation gradients, S × 4H in gate order.
    let mut da = Array2::<f64>::zeros((steps, 4 * hn));
    let mut dh_next = Array1::<f64>::zeros(hn);
    let mut dc_next = vec![0.0; hn];
    for t in (0..steps).rev() {
        let act = cache.gates.row(t);
        let act = act.as_slice().unwrap();
        let (f, i, g, o) = (&act[..hn], &act[hn..2 * hn], &act[2 * hn..3 * hn], &act[3 * hn..]);
        let c = cache.c.row(t);
        let mut row = da.row_mut(t);
        let d = row.as_slice_mut().unwrap();
        for k in 0..hn {
            let c_prev = if t > 0 { cache.c[[t - 1, k]] } else { 0.0 };
            let dh_t = dh[[t, k]] + dh_next[k];
            let tc = c[k].tanh();
            let dc = dc_next[k] + dh_t * o[k] * (1.0 - tc * tc);
            d[k] = dc * c_prev * f[k] * (1.0 - f[k]);
            d[hn + k] = dc * g[k] * i[k] * (1.0 - i[k]);
            d[2 * hn + k] = dc * i[k] * (1.0 - g[k] * g[k]);
            d[3 * hn + k] = dh_t * tc * o[k] * (1.0 - o[k]);
            dc_next[k] = dc * f[k];
        }
        general_mat_vec_mul(1.0, &wh.t(), &row, 0.0, &mut dh_next);
    }
    // h_{t-1} for every step, row 0 = zeros.
    let mut h_prev = Array2::zeros((steps, hn));
    if steps > 1 {
        h_prev.slice_mut(s![1.., ..]).assign(&cache.h.slice(s![..steps - 1, ..]));
    }
    let dwx = da.t().dot(&cache.input);
    let dwh = da.t().dot(&h_prev);
    let db = da.sum_axis(Axis(0));
    let dx = da.dot(&wx);
    let mut grads = LstmLayerParams::zeros(p.input(), hn);
    for (gi, gp) in grads.gates.iter_mut().enumerate() {
        let r = gi * hn..(gi + 1) * hn;
        gp.w_x.assign(&dwx.slice(s![r.clone(), ..]));
        gp.w_h.assign(&dwh.slice(s![r.clone(), ..]));
        gp.b.assign(&db.slice(s![r]));
    }
    (grads, dx)
}
