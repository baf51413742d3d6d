//! Confusion matrices, Macro F1, performance change and channel-group
//! permutation importance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::pipeline::{LabeledDataset, PostureLabel};
use crate::rng::{self, Purpose};
use crate::synth::{group_names, CHANNELS_PER_GROUP};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<PostureLabel>,
    pub counts: Array2<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub label: PostureLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true instances.
    pub support: u64,
    pub predicted: u64,
}

impl ClassScore {
    /// True when the class occurs in the truth or the predictions.
    pub fn present(&self) -> bool {
        self.support > 0 || self.predicted > 0
    }
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<PostureLabel>) -> Self {
        let n = classes.len();
        ConfusionMatrix { classes, counts: Array2::zeros((n, n)) }
    }

    pub fn from_pairs(classes: Vec<PostureLabel>, pairs: &[(PostureLabel, PostureLabel)]) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        for &(t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    fn index(&self, l: PostureLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::invalid(format!("class {l} is not in the confusion matrix")))
    }

    pub fn record(&mut self, truth: PostureLabel, predicted: PostureLabel) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[[t, p]] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn scores(&self) -> Vec<ClassScore> {
        let n = self.classes.len();
        (0..n)
            .map(|c| {
                let tp = self.counts[[c, c]] as f64;
                let support = self.counts.row(c).sum();
                let predicted = self.counts.column(c).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassScore { label: self.classes[c], precision, recall, f1, support, predicted }
            })
            .collect()
    }

    /// Classes that enter the macro average.
    pub fn contributing(&self) -> Vec<PostureLabel> {
        self.scores().into_iter().filter(|s| s.present()).map(|s| s.label).collect()
    }

    pub fn macro_f1(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::invalid("macro F1 of an empty confusion matrix"));
        }
        let present: Vec<f64> = self.scores().iter().filter(|s| s.present()).map(|s| s.f1).collect();
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Array2<f64> {
        let mut out = self.counts.mapv(|v| v as f64);
        for mut row in out.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        out
    }

    pub fn to_csv(&self, normalized: bool) -> String {
        let mut s = String::from("truth");
        for c in &self.classes {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        let norm = self.row_normalized();
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(c.code());
            for j in 0..self.classes.len() {
                if normalized {
                    write!(s, ",{:.4}", norm[[i, j]]).unwrap();
                } else {
                    write!(s, ",{}", self.counts[[i, j]]).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Per-class scores as CSV (`class,precision,recall,f1,support,contributes`).
pub fn scores_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("class,precision,recall,f1,support,contributes\n");
    for sc in cm.scores() {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{},{}",
            sc.label, sc.precision, sc.recall, sc.f1, sc.support, sc.present()
        )
        .unwrap();
    }
    s
}

/// `100·(f1 − baseline)/baseline`, unrounded.
pub fn performance_change_raw(f1: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) || !f1.is_finite() || !baseline.is_finite() {
        return Err(Error::invalid(format!("baseline must be positive and finite, got {baseline}")));
    }
    Ok(100.0 * (f1 - baseline) / baseline)
}

/// Percentage change rounded to one decimal place.
pub fn performance_change(f1: f64, baseline: f64) -> Result<f64> {
    let raw = performance_change_raw(f1, baseline)?;
    let r = (raw * 10.0).round() / 10.0;
    // Avoid printing "-0.0".
    Ok(if r == 0.0 { 0.0 } else { r })
}

/// Named set of channel columns, e.g. `chest_acc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: Vec<usize>,
}

impl ChannelGroup {
    /// Consecutive triples named `{placement}_{acc|gyro}`.
    pub fn standard(channels: usize) -> Vec<ChannelGroup> {
        group_names(channels)
            .into_iter()
            .enumerate()
            .map(|(g, name)| ChannelGroup {
                name,
                channels: (g * CHANNELS_PER_GROUP..((g + 1) * CHANNELS_PER_GROUP).min(channels)).collect(),
            })
            .collect()
    }
}

/// Anything that maps a motion image to a label.
pub trait Classifier: Sync {
    fn classes(&self) -> Vec<PostureLabel>;
    fn classify(&self, image: ArrayView2<f64>) -> Result<PostureLabel>;
}

/// Classifies every image and tallies a confusion matrix over the union of
/// the classifier's classes and the dataset's labels.
pub fn confusion<C: Classifier + ?Sized>(clf: &C, ds: &LabeledDataset, exec: Execution) -> Result<ConfusionMatrix> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds: Vec<Result<PostureLabel>> = exec.map_slice(&ds.images, |img| clf.classify(img.data.view()));
    let mut classes = clf.classes();
    classes.extend(ds.classes());
    classes.sort();
    classes.dedup();
    let mut cm = ConfusionMatrix::new(classes);
    for (img, p) in ds.images.iter().zip(preds) {
        cm.record(img.label, p?)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupImportance {
    pub group: String,
    /// Mean over repeats of permuted − baseline Macro F1.
    pub delta_mean: f64,
    pub delta_std: f64,
    pub permuted_f1: Vec<f64>,
    /// Mean per-class F1 change.
    pub class_delta: BTreeMap<PostureLabel, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub baseline_f1: f64,
    pub baseline_class_f1: BTreeMap<PostureLabel, f64>,
    pub groups: Vec<GroupImportance>,
}

impl ImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,baseline_f1,delta_mean,delta_std\n");
        for g in &self.groups {
            writeln!(s, "{},{:.6},{:.6},{:.6}", g.group, self.baseline_f1, g.delta_mean, g.delta_std).unwrap();
        }
        s
    }

    /// Long-format per-class changes (`group,class,delta_f1,change_pct`);
    /// the percentage is empty when the baseline class F1 is zero.
    pub fn class_csv(&self) -> String {
        let mut s = String::from("group,class,delta_f1,change_pct\n");
        for g in &self.groups {
            for (l, d) in &g.class_delta {
                let base = self.baseline_class_f1.get(l).copied().unwrap_or(0.0);
                let pct = if base > 0.0 { format!("{:.1}", 100.0 * d / base) } else { String::new() };
                writeln!(s, "{},{},{:.6},{}", g.group, l, d, pct).unwrap();
            }
        }
        s
    }
}

fn validate_groups(groups: &[ChannelGroup], channels: usize) -> Result<()> {
    let mut owner: Vec<Option<&str>> = vec![None; channels];
    for g in groups {
        if g.channels.is_empty() {
            return Err(Error::invalid(format!("group {} has no channels", g.name)));
        }
        for &c in &g.channels {
            let slot = owner
                .get_mut(c)
                .ok_or_else(|| Error::invalid(format!("group {} references channel {c} of {channels}", g.name)))?;
            if let Some(prev) = slot {
                return Err(Error::invalid(format!("groups {prev} and {} overlap on channel {c}", g.name)));
            }
            *slot = Some(&g.name);
        }
    }
    Ok(())
}

/// Copy of `ds` where image `i` takes the group's columns from image
/// `perm[i]`.
pub fn permute_group(ds: &LabeledDataset, group: &ChannelGroup, perm: &[usize]) -> LabeledDataset {
    let mut out = ds.clone();
    for (i, &src) in perm.iter().enumerate() {
        for &c in &group.channels {
            out.images[i].data.column_mut(c).assign(&ds.images[src].data.column(c));
        }
    }
    out
}

fn class_f1(cm: &ConfusionMatrix) -> BTreeMap<PostureLabel, f64> {
    cm.scores().into_iter().filter(|s| s.present()).map(|s| (s.label, s.f1)).collect()
}

pub fn permutation_importance<C: Classifier + ?Sized>(
    clf: &C,
    ds: &LabeledDataset,
    groups: &[ChannelGroup],
    repeats: usize,
    seed: u64,
    exec: Execution,
) -> Result<ImportanceReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    validate_groups(groups, ds.channels)?;
    let base_cm = confusion(clf, ds, exec)?;
    let baseline_f1 = base_cm.macro_f1()?;
    let baseline_class_f1 = class_f1(&base_cm);
    let mut out = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let mut permuted_f1 = Vec::with_capacity(repeats);
        let mut class_delta: BTreeMap<PostureLabel, f64> = BTreeMap::new();
        for r in 0..repeats {
            let mut perm: Vec<usize> = (0..ds.len()).collect();
            perm.shuffle(&mut rng::stream(seed, Purpose::Permutation, &[g as u64, r as u64]));
            let cm = confusion(clf, &permute_group(ds, group, &perm), exec)?;
            permuted_f1.push(cm.macro_f1()?);
            let per = class_f1(&cm);
            for l in baseline_class_f1.keys().chain(per.keys()) {
                if !class_delta.contains_key(l) {
                    class_delta.insert(*l, 0.0);
                }
            }
            for (l, d) in class_delta.iter_mut() {
                let a = per.get(l).copied().unwrap_or(0.0);
                let b = baseline_class_f1.get(l).copied().unwrap_or(0.0);
                *d += (a - b) / repeats as f64;
            }
        }
        let deltas: Vec<f64> = permuted_f1.iter().map(|f| f - baseline_f1).collect();
        let (delta_mean, delta_std) = mean_std(&deltas);
        out.push(GroupImportance { group: group.name.clone(), delta_mean, delta_std, permuted_f1, class_delta });
    }
    Ok(ImportanceReport { baseline_f1, baseline_class_f1, groups: out })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
