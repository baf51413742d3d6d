//! Mini-batch Adam training with best-validation checkpointing, evaluation
//! and model persistence.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;

use crate::container::{short_hash, Container, DType};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Classifier, ConfusionMatrix};
use crate::nn::{Architecture, ClnModel, Padding, Params};
use crate::par::Execution;
use crate::pipeline::{LabeledDataset, PostureLabel};
use crate::rng::{self, Purpose};

pub const LR1: f64 = 1e-2;
pub const LR2: f64 = 1e-3;
pub const LR3: f64 = 1e-4;

pub const MODEL_MAGIC: &str = "CLN-MODEL";

/// Examples per gradient work unit. Fixed so the reduction order (and hence
/// every bit of the result) is independent of the thread count.
const GRAD_CHUNK: usize = 8;

/// Parses `LR1`/`LR2`/`LR3` (any case) or a positive number.
pub fn parse_learning_rate(s: &str) -> Result<f64> {
    let lr = match s.trim().to_ascii_uppercase().as_str() {
        "LR1" => LR1,
        "LR2" => LR2,
        "LR3" => LR3,
        other => other
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad learning rate {s:?}")))?,
    };
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    Ok(lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// End training once validation Macro F1 reaches 1.0. The returned model
    /// is the same as without the cut-off, since no later epoch can improve
    /// on it; only the history is shorter.
    pub stop_when_perfect: bool,
    /// End training once validation Macro F1 reaches this value.
    pub stop_at_val_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: LR2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 300,
            epochs: 300,
            seed: 0,
            stop_when_perfect: false,
            stop_at_val_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch and epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("adam betas must be in [0,1) and eps positive"));
        }
        if self.stop_at_val_f1.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::invalid("stop_at_val_f1 must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let mut s = format!(
            "lr={};beta1={};beta2={};eps={};batch={};epochs={};seed={};stop_when_perfect={}",
            self.lr, self.beta1, self.beta2, self.eps, self.batch, self.epochs, self.seed, self.stop_when_perfect
        );
        if let Some(t) = self.stop_at_val_f1 {
            s.push_str(&format!(";stop_at_val_f1={t}"));
        }
        s
    }
}

/// Hash of the training configuration together with the architecture.
pub fn config_hash(arch: &Architecture, cfg: &TrainConfig) -> String {
    short_hash(&format!("{};{}", arch_canonical(arch), cfg.canonical()))
}

fn arch_canonical(a: &Architecture) -> String {
    format!(
        "steps={};channels={};conv_layers={};kernels={};kernel={}x{};padding={};lstm_layers={};hidden={};dropout={}",
        a.steps,
        a.channels,
        a.conv_layers,
        a.kernels,
        a.kernel_h,
        a.kernel_w,
        a.padding.name(),
        a.lstm_layers,
        a.hidden,
        a.dropout
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One Adam update. Fails without touching anything if a gradient entry is
/// not finite.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for t in grads.tensors() {
        if let Some(j) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{j}]", t.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let g = grads.tensors();
    for (((p, m), v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(g)
    {
        for j in 0..p.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's examples.
    pub loss: f64,
    pub val_macro_f1: f64,
    pub saved: bool,
    pub wall_s: f64,
}

/// Wall time is not part of equality.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch && self.loss == o.loss && self.val_macro_f1 == o.val_macro_f1 && self.saved == o.saved
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().filter(|e| e.saved).last()
    }

    /// `epoch,loss,val_macro_f1,saved`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_macro_f1,saved\n");
        for e in &self.epochs {
            writeln!(s, "{},{:.6},{:.6},{}", e.epoch, e.loss, e.val_macro_f1, e.saved as u8).unwrap();
        }
        s
    }
}

impl Classifier for ClnModel {
    fn classes(&self) -> Vec<PostureLabel> {
        self.classes.clone()
    }

    fn classify(&self, image: ArrayView2<f64>) -> Result<PostureLabel> {
        Ok(self.classes[self.predict_index(image)?])
    }
}

fn check_head(model: &ClnModel, ds: &LabeledDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid(format!("{what} dataset is empty")));
    }
    if (ds.steps, ds.channels) != (model.arch.steps, model.arch.channels) {
        return Err(Error::invalid(format!(
            "{what} images are {}x{}, model expects {}x{}",
            ds.steps, ds.channels, model.arch.steps, model.arch.channels
        )));
    }
    if let Some(l) = ds.classes().into_iter().find(|l| model.class_index(*l).is_none()) {
        return Err(Error::invalid(format!("{what} class {l} is outside the model head")));
    }
    Ok(())
}

/// Infer-mode evaluation: confusion matrix and Macro F1.
pub fn evaluate(model: &ClnModel, ds: &LabeledDataset, exec: Execution) -> Result<(ConfusionMatrix, f64)> {
    check_head(model, ds, "evaluation")?;
    let cm = confusion(model, ds, exec)?;
    let f1 = cm.macro_f1()?;
    Ok((cm, f1))
}

/// Mean loss and summed gradient over `batch` (indices into `ds`).
pub fn batch_gradient(
    model: &ClnModel,
    ds: &LabeledDataset,
    batch: &[(usize, u64)],
    exec: Execution,
) -> Result<(f64, Params)> {
    let parts = exec.map_chunks(batch, GRAD_CHUNK, |chunk| -> Result<(f64, Params)> {
        let mut acc: Option<(f64, Params)> = None;
        for &(i, seed) in chunk {
            let img = &ds.images[i];
            let label = model
                .class_index(img.label)
                .ok_or_else(|| Error::invalid(format!("class {} is outside the model head", img.label)))?;
            let (loss, g) = model.loss_and_grad(img.data.view(), label, seed)?;
            match &mut acc {
                Some((l, a)) => {
                    *l += loss;
                    a.add_assign(&g);
                }
                None => acc = Some((loss, g)),
            }
        }
        Ok(acc.expect("chunks are never empty"))
    });
    let mut total: Option<(f64, Params)> = None;
    for part in parts {
        let (l, g) = part?;
        match &mut total {
            Some((tl, tg)) => {
                *tl += l;
                tg.add_assign(&g);
            }
            None => total = Some((l, g)),
        }
    }
    let (loss, mut grad) = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Trains a freshly initialized model whose head covers the training labels.
pub fn train(
    arch: &Architecture,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ClnModel, TrainHistory)> {
    let mut classes = train_ds.classes();
    classes.extend(val_ds.classes());
    classes.sort();
    classes.dedup();
    let init = ClnModel::new(arch.clone(), classes, cfg.seed)?;
    train_from(init, train_ds, val_ds, cfg, exec, |_, _| Ok(()))
}

/// Trains starting from `init` with fresh optimizer state. `on_save` runs
/// each time the best checkpoint is overwritten.
pub fn train_from<F>(
    init: ClnModel,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_save: F,
) -> Result<(ClnModel, TrainHistory)>
where
    F: FnMut(&ClnModel, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    check_head(&init, train_ds, "training")?;
    check_head(&init, val_ds, "validation")?;
    let mut model = init;
    let mut best = model.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut adam = AdamState::new(&model.params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch).enumerate() {
            let tagged: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, rng::derive(cfg.seed, Purpose::Dropout, &[epoch as u64, b as u64, k as u64])))
                .collect();
            let (loss, grad) = batch_gradient(&model, train_ds, &tagged, exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b} (parameter norm {:.3e})",
                    model.params.norm()
                )));
            }
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut model.params, &grad, &mut adam, cfg)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            history.optimizer_steps += 1;
        }
        let (_, val_f1) = evaluate(&model, val_ds, exec)?;
        let saved = val_f1 > best_f1;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_ds.len() as f64,
            val_macro_f1: val_f1,
            saved,
            wall_s: started.elapsed().as_secs_f64(),
        };
        if saved {
            best_f1 = val_f1;
            best = model.clone();
            on_save(&best, &record)?;
        }
        history.epochs.push(record);
        if cfg.stop_when_perfect && best_f1 >= 1.0 || cfg.stop_at_val_f1.is_some_and(|t| best_f1 >= t) {
            break;
        }
    }
    Ok((best, history))
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_macro_f1: f64,
    pub config_hash: String,
}

/// Text header plus little-endian f32 tensors in declaration order.
pub fn save_model<W: Write>(model: &ClnModel, meta: &CheckpointMeta, out: W) -> std::io::Result<()> {
    let a = &model.arch;
    let mut c = Container::default();
    c.set("descriptor", a.descriptor());
    c.set("steps", a.steps);
    c.set("channels", a.channels);
    c.set("conv_layers", a.conv_layers);
    c.set("kernels", a.kernels);
    c.set("kernel_h", a.kernel_h);
    c.set("kernel_w", a.kernel_w);
    c.set("padding", a.padding.name());
    c.set("lstm_layers", a.lstm_layers);
    c.set("hidden", a.hidden);
    c.set("dropout", a.dropout);
    c.set("classes", model.classes.iter().map(|l| l.code()).collect::<Vec<_>>().join(","));
    c.set("seed", meta.seed);
    c.set("epoch", meta.epoch);
    c.set("val_macro_f1", format!("{:.6}", meta.val_macro_f1));
    c.set("config_hash", &meta.config_hash);
    for t in model.params.tensors() {
        c.push(t.name, DType::F32, &t.shape, t.data.to_vec());
    }
    c.write(MODEL_MAGIC, out)
}

pub fn load_model<R: Read>(input: R) -> Result<(ClnModel, CheckpointMeta)> {
    let mut c = Container::read(MODEL_MAGIC, input)?;
    let arch = Architecture {
        steps: c.parse("steps")?,
        channels: c.parse("channels")?,
        conv_layers: c.parse("conv_layers")?,
        kernels: c.parse("kernels")?,
        kernel_h: c.parse("kernel_h")?,
        kernel_w: c.parse("kernel_w")?,
        padding: Padding::parse(c.get("padding")?).map_err(|e| Error::format(e.to_string()))?,
        lstm_layers: c.parse("lstm_layers")?,
        hidden: c.parse("hidden")?,
        dropout: c.parse("dropout")?,
    };
    if c.get("descriptor")? != arch.descriptor() {
        return Err(Error::format("descriptor does not match the layer counts"));
    }
    let classes = crate::pipeline::parse_label_list(c.get("classes")?).map_err(|e| Error::format(e.to_string()))?;
    let mut params = Params::zeros(&arch, classes.len()).map_err(|e| Error::format(e.to_string()))?;
    let layout: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    for ((name, shape), dst) in layout.iter().zip(params.tensors_mut()) {
        let v = c.take(name, shape)?;
        dst.copy_from_slice(&v);
    }
    if let Some(extra) = c.tensors.first() {
        return Err(Error::format(format!("unexpected tensor {:?}", extra.name)));
    }
    let meta = CheckpointMeta {
        seed: c.parse("seed")?,
        epoch: c.parse("epoch")?,
        val_macro_f1: c.parse("val_macro_f1")?,
        config_hash: c.get("config_hash")?.to_string(),
    };
    Ok((ClnModel { arch, classes, params }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{MotionImage, PostureLabel::*};
    use ndarray::Array2;
    use rand::Rng;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { lr, ..Default::default() }
    }

    fn arch() -> Architecture {
        Architecture {
            steps: 8,
            channels: 4,
            conv_layers: 1,
            kernels: 3,
            kernel_h: 3,
            kernel_w: 4,
            padding: Padding::Same,
            lstm_layers: 2,
            hidden: 6,
            dropout: 0.2,
        }
    }

    /// Each class is a sinusoid at its own frequency on every channel.
    fn toy(n: usize, seed: u64) -> LabeledDataset {
        let mut r = rng::stream(seed, Purpose::SignalNoise, &[]);
        let mut ds = LabeledDataset::new("toy", 8, 4);
        for i in 0..n {
            let (label, f) = [(BT, 0.5), (KN, 1.5), (ST, 3.0)][i % 3];
            let phase: f64 = r.gen_range(0.0..6.28);
            let data = Array2::from_shape_fn((8, 4), |(t, c)| (f * t as f64 + phase + c as f64).sin());
            ds.push(MotionImage { data, label, start: i as f64 }).unwrap();
        }
        ds
    }

    fn scalar_params(v: f64) -> Params {
        let mut p = Params::zeros(&arch(), 2).unwrap();
        for t in p.tensors_mut() {
            t.fill(v);
        }
        p
    }

    #[test]
    fn adam_hand_example() {
        let mut p = scalar_params(0.0);
        let g = scalar_params(0.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg(1e-3)).unwrap();
        assert_eq!(s.t, 1);
        let (m, v) = (s.m.dense_b[0], s.v.dense_b[0]);
        assert!((m - 0.05).abs() < 1e-15 && (v - 2.5e-4).abs() < 1e-15);
        let m_hat = 0.05 / (1.0 - 0.9);
        let v_hat = 2.5e-4 / (1.0 - 0.999);
        assert!((m_hat - 0.5f64).abs() < 1e-12 && (v_hat - 0.25f64).abs() < 1e-12);
        assert!((p.dense_b[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn adam_null_and_constant_gradients() {
        let mut p = scalar_params(0.3);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_params(0.0), &mut s, &cfg(1e-3)).unwrap();
        assert_eq!(p, before);

        let mut s = AdamState::new(&p);
        let g = scalar_params(2.0);
        let mut last = 0.0;
        for _ in 0..2000 {
            let prev = p.dense_b[0];
            adam_step(&mut p, &g, &mut s, &cfg(1e-3)).unwrap();
            last = prev - p.dense_b[0];
        }
        assert!((last - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn adam_is_scale_free() {
        let g = {
            let mut g = scalar_params(0.0);
            let mut r = rng::stream(1, Purpose::Init, &[]);
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
            }
            g
        };
        let mut g10 = g.clone();
        g10.scale(10.0);
        let (mut a, mut b) = (scalar_params(0.0), scalar_params(0.0));
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        adam_step(&mut a, &g, &mut sa, &cfg(1e-3)).unwrap();
        adam_step(&mut b, &g10, &mut sb, &cfg(1e-3)).unwrap();
        // First step is lr·g/(|g| + eps), so only eps separates the two.
        for ((x, y), gt) in a.tensors().iter().zip(b.tensors()).zip(g.tensors()) {
            for ((u, v), gv) in x.data.iter().zip(y.data).zip(gt.data) {
                assert_eq!(u.signum(), v.signum());
                assert!((u - v).abs() <= 1e-3 * 1e-8 / gv.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_by_name() {
        let mut p = scalar_params(0.0);
        let mut g = scalar_params(0.1);
        g.lstm[0].gates[1].w_x[[0, 2]] = f64::NAN;
        let mut s = AdamState::new(&p);
        let before = p.clone();
        let err = adam_step(&mut p, &g, &mut s, &cfg(1e-3)).unwrap_err();
        assert!(err.to_string().contains("lstm0.w_xi[2]"), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn learning_rate_names() {
        assert_eq!(parse_learning_rate("LR1").unwrap(), 1e-2);
        assert_eq!(parse_learning_rate("lr3").unwrap(), 1e-4);
        assert_eq!(parse_learning_rate("0.005").unwrap(), 0.005);
        assert!(parse_learning_rate("0").is_err());
        assert!(parse_learning_rate("fast").is_err());
    }

    #[test]
    fn overfits_tiny_set() {
        let ds = toy(10, 1);
        let c = TrainConfig { lr: 1e-2, epochs: 50, batch: 2, ..Default::default() };
        let mut a = arch();
        a.dropout = 0.0;
        let (_, h) = train(&a, &ds, &ds, &c, Execution::default()).unwrap();
        assert!(h.epochs.last().unwrap().loss < 0.05, "{}", h.to_csv());
        assert!(h.epochs[9].loss < h.epochs[0].loss);
        assert_eq!(h.epochs.len(), 50);
    }

    #[test]
    fn one_step_per_epoch_when_batch_covers_set() {
        let ds = toy(12, 2);
        let c = TrainConfig { epochs: 1, batch: 50, ..Default::default() };
        let (_, h) = train(&arch(), &ds, &ds, &c, Execution::default()).unwrap();
        assert_eq!(h.optimizer_steps, 1);
        let c = TrainConfig { epochs: 2, batch: 5, ..Default::default() };
        let (_, h) = train(&arch(), &ds, &ds, &c, Execution::default()).unwrap();
        assert_eq!(h.optimizer_steps, 6);
    }

    #[test]
    fn deterministic_and_checkpoints_increase() {
        let tr = toy(30, 3);
        let va = toy(12, 4);
        let c = TrainConfig { lr: 5e-3, epochs: 6, batch: 8, seed: 5, ..Default::default() };
        let run = |exec| {
            let mut saved = Vec::new();
            let init = ClnModel::new(arch(), vec![BT, KN, ST], c.seed).unwrap();
            let (m, h) = train_from(init, &tr, &va, &c, exec, |m, r| {
                let mut buf = Vec::new();
                save_model(m, &CheckpointMeta { seed: 5, epoch: r.epoch, val_macro_f1: r.val_macro_f1, config_hash: config_hash(&arch(), &c) }, &mut buf).unwrap();
                saved.push((r.val_macro_f1, buf));
                Ok(())
            })
            .unwrap();
            (m, h, saved)
        };
        let (m1, h1, s1) = run(Execution::Sequential);
        let (m2, h2, s2) = run(Execution::Parallel);
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
        assert!(s1.windows(2).all(|w| w[1].0 > w[0].0));
        assert_eq!(h1.epochs.iter().filter(|e| e.saved).count(), s1.len());
    }

    #[test]
    fn evaluate_contract() {
        let ds = toy(12, 5);
        let m = ClnModel::new(arch(), vec![BT, KN, ST], 1).unwrap();
        let mut buf1 = Vec::new();
        let meta = CheckpointMeta { seed: 1, epoch: 0, val_macro_f1: 0.0, config_hash: "x".into() };
        save_model(&m, &meta, &mut buf1).unwrap();
        let (cm, f1) = evaluate(&m, &ds, Execution::default()).unwrap();
        assert_eq!(cm.total(), 12);
        assert!((0.0..=1.0).contains(&f1));
        let mut buf2 = Vec::new();
        save_model(&m, &meta, &mut buf2).unwrap();
        assert_eq!(buf1, buf2);

        let narrow = ClnModel::new(arch(), vec![BT, KN], 1).unwrap();
        assert!(evaluate(&narrow, &ds, Execution::default()).is_err());
        assert!(evaluate(&m, &LabeledDataset::new("e", 8, 4), Execution::default()).is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        let empty = LabeledDataset::new("e", 8, 4);
        assert!(train(&arch(), &empty, &toy(6, 1), &TrainConfig::default(), Execution::default()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut a = arch();
        a.conv_layers = 2;
        let m = ClnModel::new(a, vec![BT, KN, ST], 7).unwrap();
        let meta = CheckpointMeta { seed: 7, epoch: 3, val_macro_f1: 0.5, config_hash: "abcd".into() };
        let mut buf = Vec::new();
        save_model(&m, &meta, &mut buf).unwrap();
        let (back, bm) = load_model(buf.as_slice()).unwrap();
        assert_eq!(bm, meta);
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.arch.descriptor(), "C2L2");
        let text = String::from_utf8_lossy(&buf[..200]).to_string();
        assert!(text.contains("descriptor=C2L2"));
        let mut r = rng::stream(2, Purpose::SignalNoise, &[]);
        let mut agree = 0;
        for _ in 0..1000 {
            let x = Array2::from_shape_fn((8, 4), |_| r.gen_range(-2.0..2.0));
            let (p, q) = (m.predict_proba(x.view()).unwrap(), back.predict_proba(x.view()).unwrap());
            assert!((&p - &q).iter().all(|d| d.abs() < 1e-5));
            agree += (m.predict_index(x.view()).unwrap() == back.predict_index(x.view()).unwrap()) as usize;
        }
        assert_eq!(agree, 1000);
        for cut in [10, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(load_model(&buf[..cut]), Err(Error::Format(_))));
        }
    }
}
