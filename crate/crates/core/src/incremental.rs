//! Incremental adaptation harness: one-to-one (sequential) and many-to-one
//! (leave-one-out) schemes with incremental, forgetting and baseline scores.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::metrics::{performance_change, ConfusionMatrix};
use crate::nn::{Architecture, ClnModel};
use crate::par::Execution;
use crate::pipeline::{merge_generalized, stratified_shuffle_split, LabeledDataset, PostureLabel, Split, SplitSpec};
use crate::rng::{self, Purpose};
use crate::trainer::{config_hash, evaluate, train, train_from, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlScheme {
    OtO,
    MtO,
}

impl fmt::Display for IlScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IlScheme::OtO => "oto",
            IlScheme::MtO => "mto",
        })
    }
}

impl FromStr for IlScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oto" => Ok(IlScheme::OtO),
            "mto" => Ok(IlScheme::MtO),
            _ => Err(Error::invalid(format!("unknown scheme {s:?} (expected oto or mto)"))),
        }
    }
}

/// How each subject's windows are divided into training/validation/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubjectSplit {
    /// One round of the stratified shuffle split.
    Stratified(SplitSpec),
    /// Temporal 90/10 per posture run, then a 4:1 shuffle of the pool.
    Quasi { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlConfig {
    pub arch: Architecture,
    /// Used for every from-scratch model (personalized and generalized).
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub split: SubjectSplit,
}

impl IlConfig {
    pub fn new(arch: Architecture, train: TrainConfig, adapt: TrainConfig) -> Self {
        IlConfig { arch, train, adapt, split: SubjectSplit::Stratified(SplitSpec { rounds: 1, ..Default::default() }) }
    }
}

/// Continues training `source` on the target data with fresh optimizer
/// state. Target classes missing from the head are added first. Zero epochs
/// returns the source unchanged.
pub fn adapt(
    source: &ClnModel,
    target_train: &LabeledDataset,
    target_val: &LabeledDataset,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ClnModel, TrainHistory)> {
    for ds in [target_train, target_val] {
        if !ds.is_empty() && (ds.steps, ds.channels) != (source.arch.steps, source.arch.channels) {
            return Err(Error::invalid(format!(
                "target windows are {}x{} but the source model ({}) expects {}x{}",
                ds.steps,
                ds.channels,
                source.arch.descriptor(),
                source.arch.steps,
                source.arch.channels
            )));
        }
    }
    if cfg.epochs == 0 {
        return Ok((source.clone(), TrainHistory::default()));
    }
    let mut extra = target_train.classes();
    extra.extend(target_val.classes());
    let init = source.with_classes(&extra, cfg.seed);
    train_from(init, target_train, target_val, cfg, exec, |_, _| Ok(()))
}

/// Fails unless `model` was built with architecture `arch`.
pub fn ensure_architecture(model: &ClnModel, arch: &Architecture) -> Result<()> {
    if &model.arch != arch {
        return Err(Error::invalid(format!(
            "checkpoint architecture {} ({} kernels, {} units) does not match the configured {} ({} kernels, {} units)",
            model.arch.descriptor(),
            model.arch.kernels,
            model.arch.hidden,
            arch.descriptor(),
            arch.kernels,
            arch.hidden
        )));
    }
    Ok(())
}

/// Per contiguous same-label run of windows: the first `floor(0.9 n)` go to
/// the training pool and the rest to test (in order). The pool is shuffled
/// and split 4:1 into training and validation.
pub fn quasi_experiment_split(ds: &LabeledDataset, seed: u64) -> Result<Split> {
    if ds.is_empty() {
        return Err(Error::invalid("quasi-experiment split of an empty dataset"));
    }
    let mut pool = Vec::new();
    let mut test = Vec::new();
    let mut start = 0;
    while start < ds.len() {
        let label = ds.images[start].label;
        let mut end = start;
        while end < ds.len() && ds.images[end].label == label {
            end += 1;
        }
        let n = end - start;
        let cut = start + n * 9 / 10;
        pool.extend(start..cut);
        test.extend(cut..end);
        start = end;
    }
    pool.shuffle(&mut rng::stream(seed, Purpose::Split, &[u64::MAX]));
    let validation_len = (pool.len() as f64 / 5.0).round() as usize;
    let mut validation = pool[..validation_len].to_vec();
    let mut training = pool[validation_len..].to_vec();
    validation.sort_unstable();
    training.sort_unstable();
    Ok(Split { training, validation, test })
}

/// A subject's three parts.
#[derive(Debug, Clone)]
pub struct SubjectParts {
    pub name: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn split_subject(ds: &LabeledDataset, split: &SubjectSplit) -> Result<SubjectParts> {
    let s = match split {
        SubjectSplit::Stratified(spec) => {
            let spec = SplitSpec { rounds: 1, ..*spec };
            stratified_shuffle_split(ds, &spec)?.remove(0)
        }
        SubjectSplit::Quasi { seed } => quasi_experiment_split(ds, *seed)?,
    };
    Ok(SubjectParts {
        name: ds.subject.clone(),
        train: ds.subset(&s.training),
        val: ds.subset(&s.validation),
        test: ds.subset(&s.test),
    })
}

fn merge(parts: &[&LabeledDataset]) -> Result<LabeledDataset> {
    let owned: Vec<LabeledDataset> = parts.iter().map(|d| (*d).clone()).collect();
    merge_generalized(&owned, &Default::default())
}

/// Macro F1 plus per-class F1 over contributing classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub macro_f1: f64,
    pub per_class: BTreeMap<PostureLabel, f64>,
}

impl Score {
    fn of(cm: &ConfusionMatrix, macro_f1: f64) -> Score {
        let per_class = cm.scores().into_iter().filter(|s| s.present()).map(|s| (s.label, s.f1)).collect();
        Score { macro_f1, per_class }
    }
}

fn score(model: &ClnModel, ds: &LabeledDataset, exec: Execution) -> Result<Score> {
    // A model may be scored on classes it has never seen; widen the head
    // with rows that can never win instead of failing.
    let missing: Vec<PostureLabel> = ds.classes().into_iter().filter(|l| model.class_index(*l).is_none()).collect();
    let (cm, f1) = if missing.is_empty() {
        evaluate(model, ds, exec)?
    } else {
        let mut wide = model.with_classes(&missing, 0);
        for l in &missing {
            let r = wide.class_index(*l).unwrap();
            wide.params.dense_w.row_mut(r).fill(0.0);
            wide.params.dense_b[r] = f64::NEG_INFINITY;
        }
        evaluate(&wide, ds, exec)?
    };
    Ok(Score::of(&cm, f1))
}

/// One report row, one per subject. OtO: incremental scores come from the
/// model adapted *to* this subject and forgetting scores from the model
/// adapted *away from* it to the next subject. MtO: this subject is the
/// held-out target and forgetting is measured on the merged rest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IlRow {
    pub subject: String,
    /// Model the incremental scores start from.
    pub source: Option<String>,
    pub pre_adaptation: Option<Score>,
    pub incremental: Option<Score>,
    pub forgetting: Option<Score>,
    /// Personalized model trained from scratch, scored on this subject.
    pub personalized: Option<Score>,
    /// Baseline for the forgetting score (personalized for OtO, generalized
    /// on the rest for MtO).
    pub source_baseline: Option<Score>,
}

impl IlRow {
    pub fn incremental_change(&self) -> Option<f64> {
        change(self.incremental.as_ref()?, self.personalized.as_ref()?)
    }

    pub fn forgetting_change(&self) -> Option<f64> {
        change(self.forgetting.as_ref()?, self.source_baseline.as_ref()?)
    }
}

fn change(f: &Score, base: &Score) -> Option<f64> {
    performance_change(f.macro_f1, base.macro_f1).ok()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlReport {
    pub scheme: IlScheme,
    pub adapt_lr: f64,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<IlRow>,
    /// Set when a training run failed; rows are then incomplete.
    pub error: Option<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

impl IlReport {
    pub fn is_valid(&self) -> bool {
        self.error.is_none()
    }

    /// Subject-weighted means.
    pub fn mean_incremental_f1(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.incremental.as_ref().map(|s| s.macro_f1)))
    }

    pub fn mean_pre_adaptation_f1(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.pre_adaptation.as_ref().map(|s| s.macro_f1)))
    }

    pub fn mean_forgetting_f1(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.forgetting.as_ref().map(|s| s.macro_f1)))
    }

    pub fn mean_incremental_change(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(IlRow::incremental_change))
    }

    pub fn mean_forgetting_change(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(IlRow::forgetting_change))
    }

    /// Table-shaped summary, one line per subject.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "scheme,lr,seed,config_hash,subject,source,pre_adaptation_f1,incremental_f1,incremental_change,\
             forgetting_f1,forgetting_change,personalized_f1,source_baseline_f1\n",
        );
        let f = |x: &Option<Score>| opt(x.as_ref().map(|v| v.macro_f1), 3);
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.scheme,
                self.adapt_lr,
                self.seed,
                self.config_hash,
                r.subject,
                r.source.clone().unwrap_or_default(),
                f(&r.pre_adaptation),
                f(&r.incremental),
                opt(r.incremental_change(), 1),
                f(&r.forgetting),
                opt(r.forgetting_change(), 1),
                f(&r.personalized),
                f(&r.source_baseline),
            )
            .unwrap();
        }
        if let Some(e) = &self.error {
            writeln!(s, "# invalid: {}", e.replace('\n', " ")).unwrap();
        }
        s
    }

    /// Long format: `scheme,lr,seed,subject,kind,class,f1`.
    pub fn class_csv(&self) -> String {
        let mut s = String::from("scheme,lr,seed,subject,kind,class,f1\n");
        for r in &self.rows {
            for (kind, score) in [
                ("pre_adaptation", &r.pre_adaptation),
                ("incremental", &r.incremental),
                ("forgetting", &r.forgetting),
                ("personalized", &r.personalized),
                ("source_baseline", &r.source_baseline),
            ] {
                if let Some(sc) = score {
                    for (l, f1) in &sc.per_class {
                        writeln!(s, "{},{},{},{},{kind},{l},{f1:.6}", self.scheme, self.adapt_lr, self.seed, r.subject)
                            .unwrap();
                    }
                }
            }
        }
        s
    }
}

fn check_subjects(subjects: &[LabeledDataset]) -> Result<()> {
    if subjects.len() < 2 {
        return Err(Error::invalid(format!("incremental schemes need at least 2 subjects, got {}", subjects.len())));
    }
    Ok(())
}

fn empty_reports(scheme: IlScheme, cfg: &IlConfig, adapts: &[TrainConfig]) -> Vec<IlReport> {
    adapts
        .iter()
        .map(|a| IlReport {
            scheme,
            adapt_lr: a.lr,
            seed: a.seed,
            config_hash: config_hash(&cfg.arch, a),
            rows: Vec::new(),
            error: None,
        })
        .collect()
}

fn personalized(parts: &SubjectParts, cfg: &IlConfig, exec: Execution) -> Result<(ClnModel, Score)> {
    let (m, _) = train(&cfg.arch, &parts.train, &parts.val, &cfg.train, exec)?;
    let s = score(&m, &parts.test, exec)?;
    Ok((m, s))
}

/// One-to-one scheme with the adaptation config from `cfg`.
pub fn run_oto(subjects: &[LabeledDataset], cfg: &IlConfig, exec: Execution) -> Result<IlReport> {
    Ok(run_oto_sweep(subjects, cfg, std::slice::from_ref(&cfg.adapt), exec)?.remove(0))
}

/// One-to-one scheme for several adaptation configs sharing the same
/// from-scratch models.
pub fn run_oto_sweep(
    subjects: &[LabeledDataset],
    cfg: &IlConfig,
    adapts: &[TrainConfig],
    exec: Execution,
) -> Result<Vec<IlReport>> {
    check_subjects(subjects)?;
    let mut reports = empty_reports(IlScheme::OtO, cfg, adapts);
    if let Err(e) = oto_inner(subjects, cfg, adapts, exec, &mut reports) {
        for r in &mut reports {
            r.error = Some(e.to_string());
        }
    }
    Ok(reports)
}

fn oto_inner(
    subjects: &[LabeledDataset],
    cfg: &IlConfig,
    adapts: &[TrainConfig],
    exec: Execution,
    reports: &mut [IlReport],
) -> Result<()> {
    let parts = subjects.iter().map(|d| split_subject(d, &cfg.split)).collect::<Result<Vec<_>>>()?;
    let mut chain: Vec<ClnModel> = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let (m_scratch, pers) = personalized(p, cfg, exec)?;
        for (k, a) in adapts.iter().enumerate() {
            let mut row = IlRow {
                subject: p.name.clone(),
                personalized: Some(pers.clone()),
                source_baseline: Some(pers.clone()),
                ..Default::default()
            };
            if i == 0 {
                chain.push(m_scratch.clone());
            } else {
                let prev = &chain[k];
                row.source = Some(parts[i - 1].name.clone());
                row.pre_adaptation = Some(score(prev, &p.test, exec)?);
                let (adapted, _) = adapt(prev, &p.train, &p.val, a, exec)?;
                row.incremental = Some(score(&adapted, &p.test, exec)?);
                let back = &mut reports[k].rows[i - 1];
                back.forgetting = Some(score(&adapted, &parts[i - 1].test, exec)?);
                chain[k] = adapted;
            }
            reports[k].rows.push(row);
        }
    }
    Ok(())
}

/// Many-to-one (leave-one-out) scheme with the adaptation config from `cfg`.
pub fn run_mto(subjects: &[LabeledDataset], cfg: &IlConfig, exec: Execution) -> Result<IlReport> {
    Ok(run_mto_sweep(subjects, cfg, std::slice::from_ref(&cfg.adapt), exec)?.remove(0))
}

pub fn run_mto_sweep(
    subjects: &[LabeledDataset],
    cfg: &IlConfig,
    adapts: &[TrainConfig],
    exec: Execution,
) -> Result<Vec<IlReport>> {
    check_subjects(subjects)?;
    let mut reports = empty_reports(IlScheme::MtO, cfg, adapts);
    if let Err(e) = mto_inner(subjects, cfg, adapts, exec, &mut reports) {
        for r in &mut reports {
            r.error = Some(e.to_string());
        }
    }
    Ok(reports)
}

fn mto_inner(
    subjects: &[LabeledDataset],
    cfg: &IlConfig,
    adapts: &[TrainConfig],
    exec: Execution,
    reports: &mut [IlReport],
) -> Result<()> {
    let parts = subjects.iter().map(|d| split_subject(d, &cfg.split)).collect::<Result<Vec<_>>>()?;
    for (t, target) in parts.iter().enumerate() {
        let rest: Vec<&SubjectParts> = parts.iter().enumerate().filter(|(i, _)| *i != t).map(|(_, p)| p).collect();
        let rest_train = merge(&rest.iter().map(|p| &p.train).collect::<Vec<_>>())?;
        let rest_val = merge(&rest.iter().map(|p| &p.val).collect::<Vec<_>>())?;
        let rest_test = merge(&rest.iter().map(|p| &p.test).collect::<Vec<_>>())?;
        let (general, _) = train(&cfg.arch, &rest_train, &rest_val, &cfg.train, exec)?;
        let general_rest = score(&general, &rest_test, exec)?;
        let pre = score(&general, &target.test, exec)?;
        let (_, pers) = personalized(target, cfg, exec)?;
        for (k, a) in adapts.iter().enumerate() {
            let (adapted, _) = adapt(&general, &target.train, &target.val, a, exec)?;
            reports[k].rows.push(IlRow {
                subject: target.name.clone(),
                source: Some(rest_train.subject.clone()),
                pre_adaptation: Some(pre.clone()),
                incremental: Some(score(&adapted, &target.test, exec)?),
                forgetting: Some(score(&adapted, &rest_test, exec)?),
                personalized: Some(pers.clone()),
                source_baseline: Some(general_rest.clone()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Padding;
    use crate::pipeline::{MotionImage, PostureLabel::*};
    use ndarray::Array2;
    use rand::Rng;

    fn runs(spec: &[(PostureLabel, usize)]) -> LabeledDataset {
        let mut ds = LabeledDataset::new("S", 1, 1);
        let mut t = 0.0;
        for &(l, n) in spec {
            for _ in 0..n {
                ds.push(MotionImage { data: Array2::zeros((1, 1)), label: l, start: t }).unwrap();
                t += 0.5;
            }
        }
        ds
    }

    #[test]
    fn quasi_split_single_run() {
        let ds = runs(&[(ST, 100)]);
        let s = quasi_experiment_split(&ds, 1).unwrap();
        assert_eq!(s.test, (90..100).collect::<Vec<_>>());
        assert_eq!(s.training.len(), 72);
        assert_eq!(s.validation.len(), 18);
        assert!(quasi_experiment_split(&runs(&[]), 1).is_err());
    }

    #[test]
    fn quasi_split_keeps_run_tails_adjacent() {
        let ds = runs(&[(ST, 20), (BT, 30), (ST, 10)]);
        let s = quasi_experiment_split(&ds, 4).unwrap();
        assert_eq!(s.test, vec![18, 19, 47, 48, 49, 59]);
        let mut all: Vec<usize> = s.training.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("MtO".parse::<IlScheme>().unwrap(), IlScheme::MtO);
        assert_eq!(IlScheme::OtO.to_string(), "oto");
        assert!("ring".parse::<IlScheme>().is_err());
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
            dropout: 0.0,
        }
    }

    fn toy(name: &str, n: usize, seed: u64, labels: &[(PostureLabel, f64)]) -> LabeledDataset {
        let mut r = rng::stream(seed, Purpose::SignalNoise, &[]);
        let mut ds = LabeledDataset::new(name, 8, 4);
        for i in 0..n {
            let (label, f) = labels[(i / 5) % labels.len()];
            let phase: f64 = r.gen_range(0.0..6.28);
            let data = Array2::from_shape_fn((8, 4), |(t, c)| (f * t as f64 + phase + c as f64).sin());
            ds.push(MotionImage { data, label, start: i as f64 }).unwrap();
        }
        ds
    }

    fn quick(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig { lr: 1e-2, epochs, batch: 16, seed, ..Default::default() }
    }

    #[test]
    fn zero_epoch_adaptation_is_identity() {
        let ds = toy("a", 40, 1, &[(BT, 0.5), (ST, 2.0)]);
        let m = ClnModel::new(arch(), vec![BT, ST], 1).unwrap();
        let (a, h) = adapt(&m, &ds, &ds, &TrainConfig { epochs: 0, ..quick(1, 1) }, Execution::default()).unwrap();
        assert_eq!(a, m);
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn adaptation_grows_head_and_leaves_source_alone() {
        let ds = toy("a", 40, 1, &[(BT, 0.5), (KN, 2.0)]);
        let m = ClnModel::new(arch(), vec![BT, ST], 1).unwrap();
        let before = m.clone();
        let (a, _) = adapt(&m, &ds, &ds, &quick(2, 3), Execution::default()).unwrap();
        assert_eq!(m, before);
        assert_eq!(a.classes, vec![BT, KN, ST]);
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let m = ClnModel::new(arch(), vec![BT, ST], 1).unwrap();
        let mut other = arch();
        other.kernels = 5;
        assert!(ensure_architecture(&m, &other).is_err());
        assert!(ensure_architecture(&m, &arch()).is_ok());
        let mut wide = LabeledDataset::new("w", 8, 5);
        wide.push(MotionImage { data: Array2::zeros((8, 5)), label: BT, start: 0.0 }).unwrap();
        assert!(adapt(&m, &wide, &wide, &quick(1, 1), Execution::default()).is_err());
    }

    #[test]
    fn report_shapes() {
        let labels = [(BT, 0.5), (ST, 2.0)];
        let subjects: Vec<LabeledDataset> = (0..3).map(|i| toy(&format!("S{i}"), 60, i, &labels)).collect();
        let cfg = IlConfig::new(arch(), quick(2, 1), quick(1, 2));
        let oto = run_oto(&subjects, &cfg, Execution::default()).unwrap();
        assert!(oto.is_valid());
        assert_eq!(oto.rows.len(), 3);
        assert!(oto.rows[0].incremental.is_none() && oto.rows[0].forgetting.is_some());
        assert!(oto.rows[2].incremental.is_some() && oto.rows[2].forgetting.is_none());
        assert_eq!(oto.rows[1].source.as_deref(), Some("S0"));

        let mto = run_mto(&subjects, &cfg, Execution::default()).unwrap();
        assert_eq!(mto.rows.len(), 3);
        assert_eq!(mto.rows[0].source.as_deref(), Some("S1+S2"));
        assert!(mto.rows.iter().all(|r| r.incremental.is_some() && r.forgetting.is_some()));
        for r in oto.rows.iter().chain(&mto.rows) {
            if let (Some(i), Some(p)) = (&r.incremental, &r.personalized) {
                assert_eq!(r.incremental_change(), Some(performance_change(i.macro_f1, p.macro_f1).unwrap()));
            }
        }
        let csv = mto.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().next().unwrap().contains("personalized_f1,source_baseline_f1"));
        assert!(mto.class_csv().contains(",incremental,BT,"));
        assert!(run_mto(&subjects[..1], &cfg, Execution::default()).is_err());
    }

    #[test]
    fn failing_run_flags_report() {
        // Second subject has a class too small for stratified splitting.
        let a = toy("a", 60, 1, &[(BT, 0.5), (ST, 2.0)]);
        let mut b = toy("b", 60, 2, &[(BT, 0.5), (ST, 2.0)]);
        b.images[0].label = WO;
        let cfg = IlConfig::new(arch(), quick(1, 1), quick(1, 2));
        let r = run_oto(&[a, b], &cfg, Execution::default()).unwrap();
        assert!(!r.is_valid());
        assert!(r.to_csv().contains("# invalid"));
    }
}
