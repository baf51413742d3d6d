//! Posture-sequence risk assessment: run-length encoding of overlapped
//! window predictions, maximum-holding-time breaches, frequency/proportion
//! statistics and OWAS action levels.
//!
//! Runs come from 1.0 s windows with 50% overlap, so a run of `n` windows
//! spans `(n + 1) * 0.5` seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::pipeline::{Comfort, PostureLabel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostureRun {
    pub label: PostureLabel,
    pub windows: usize,
}

impl PostureRun {
    pub fn duration(&self) -> f64 {
        (self.windows + 1) as f64 * 0.5
    }
}

pub fn run_length_encode(labels: &[PostureLabel]) -> Result<Vec<PostureRun>> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot encode an empty label sequence"));
    }
    let mut runs: Vec<PostureRun> = Vec::new();
    for &l in labels {
        match runs.last_mut() {
            Some(r) if r.label == l => r.windows += 1,
            _ => runs.push(PostureRun { label: l, windows: 1 }),
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OwasLevel {
    I,
    II,
    III,
}

impl fmt::Display for OwasLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OwasLevel::I => "I",
            OwasLevel::II => "II",
            OwasLevel::III => "III",
        })
    }
}

/// Labels that receive an OWAS level (LB only when it occurs).
pub const OWAS_LABELS: [PostureLabel; 4] = [PostureLabel::BT, PostureLabel::KN, PostureLabel::SQ, PostureLabel::WO];

#[derive(Debug, Clone, PartialEq)]
pub struct ErgoThresholds {
    /// Unscaled maximum holding time per label, seconds.
    pub mht_s: BTreeMap<PostureLabel, f64>,
    pub scale: f64,
    /// Upper bounds (inclusive) of levels I and II.
    pub cutoffs: (f64, f64),
}

impl Default for ErgoThresholds {
    /// 30 s for uncomfortable and 180 s for comfortable postures. TR has no
    /// holding limit.
    fn default() -> Self {
        let mht_s = PostureLabel::ALL
            .iter()
            .filter_map(|&l| match l.comfort()? {
                Comfort::Uncomfortable => Some((l, 30.0)),
                Comfort::Comfortable => Some((l, 180.0)),
            })
            .collect();
        ErgoThresholds { mht_s, scale: 1.0, cutoffs: (0.20, 0.50) }
    }
}

impl ErgoThresholds {
    pub fn with_scale(scale: f64) -> Self {
        ErgoThresholds { scale, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((l, t)) = self.mht_s.iter().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::invalid(format!("threshold for {l} must be positive, got {t}")));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("threshold scale must be positive, got {}", self.scale)));
        }
        let (a, b) = self.cutoffs;
        if !(0.0 < a && a < b && b < 1.0) {
            return Err(Error::invalid(format!("OWAS cutoffs must satisfy 0 < {a} < {b} < 1")));
        }
        Ok(())
    }

    /// Scaled threshold, or an error for labels without one.
    pub fn threshold(&self, l: PostureLabel) -> Result<f64> {
        self.mht_s
            .get(&l)
            .map(|t| t * self.scale)
            .ok_or_else(|| Error::invalid(format!("no holding-time threshold for label {l}")))
    }

    pub fn level(&self, proportion: f64) -> OwasLevel {
        if proportion <= self.cutoffs.0 {
            OwasLevel::I
        } else if proportion <= self.cutoffs.1 {
            OwasLevel::II
        } else {
            OwasLevel::III
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    pub label: PostureLabel,
    pub runs: usize,
    pub breaches: usize,
    pub breach_duration_s: f64,
    pub max_hold_s: f64,
    pub total_duration_s: f64,
    /// Runs per minute of total assessed time.
    pub frequency_per_min: f64,
    pub proportion: f64,
    pub owas: Option<OwasLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgoReport {
    /// One row per thresholded label, in label order.
    pub rows: Vec<LabelStats>,
    pub total_duration_s: f64,
}

impl ErgoReport {
    pub fn get(&self, l: PostureLabel) -> Option<&LabelStats> {
        self.rows.iter().find(|r| r.label == l)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,runs,breach_count,breach_duration_s,max_hold_s,total_duration_s,frequency_per_min,proportion,owas_level\n",
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.1},{:.1},{:.1},{:.4},{:.4},{}",
                r.label,
                r.runs,
                r.breaches,
                r.breach_duration_s,
                r.max_hold_s,
                r.total_duration_s,
                r.frequency_per_min,
                r.proportion,
                r.owas.map(|l| l.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }
}

/// Per-label accumulator shared by the batch and streaming paths.
#[derive(Debug, Clone)]
struct Accumulator {
    th: ErgoThresholds,
    stats: BTreeMap<PostureLabel, LabelStats>,
    total: f64,
}

impl Accumulator {
    fn new(th: &ErgoThresholds) -> Result<Self> {
        th.validate()?;
        let stats = th
            .mht_s
            .keys()
            .map(|&l| {
                (
                    l,
                    LabelStats {
                        label: l,
                        runs: 0,
                        breaches: 0,
                        breach_duration_s: 0.0,
                        max_hold_s: 0.0,
                        total_duration_s: 0.0,
                        frequency_per_min: 0.0,
                        proportion: 0.0,
                        owas: None,
                    },
                )
            })
            .collect();
        Ok(Accumulator { th: th.clone(), stats, total: 0.0 })
    }

    fn add(&mut self, run: PostureRun) -> Result<()> {
        if run.windows == 0 {
            return Err(Error::invalid("run with zero windows"));
        }
        let limit = self.th.threshold(run.label)?;
        let d = run.duration();
        let s = self.stats.get_mut(&run.label).expect("thresholded labels have stats");
        s.runs += 1;
        s.total_duration_s += d;
        s.max_hold_s = s.max_hold_s.max(d);
        if d > limit {
            s.breaches += 1;
            s.breach_duration_s += d;
        }
        self.total += d;
        Ok(())
    }

    fn finish(self) -> Result<ErgoReport> {
        if self.total == 0.0 {
            return Err(Error::invalid("cannot assess an empty run list"));
        }
        let minutes = self.total / 60.0;
        let lb_present = self.stats.get(&PostureLabel::LB).is_some_and(|s| s.runs > 0);
        let rows = self
            .stats
            .into_values()
            .map(|mut s| {
                s.frequency_per_min = s.runs as f64 / minutes;
                s.proportion = s.total_duration_s / self.total;
                let graded = OWAS_LABELS.contains(&s.label) || (s.label == PostureLabel::LB && lb_present);
                s.owas = graded.then(|| self.th.level(s.proportion));
                s
            })
            .collect();
        Ok(ErgoReport { rows, total_duration_s: self.total })
    }
}

pub fn assess(runs: &[PostureRun], th: &ErgoThresholds) -> Result<ErgoReport> {
    let mut acc = Accumulator::new(th)?;
    for &r in runs {
        acc.add(r)?;
    }
    acc.finish()
}

/// Window-at-a-time assessment; `finish` equals [`assess`] on the
/// run-length encoding of the same sequence.
#[derive(Debug, Clone)]
pub struct StreamingAssessor {
    acc: Accumulator,
    current: Option<PostureRun>,
}

impl StreamingAssessor {
    pub fn new(th: &ErgoThresholds) -> Result<Self> {
        Ok(StreamingAssessor { acc: Accumulator::new(th)?, current: None })
    }

    /// Adds one window. Returns the run that just closed, if any.
    pub fn push(&mut self, label: PostureLabel) -> Result<Option<PostureRun>> {
        self.acc.th.threshold(label)?;
        match &mut self.current {
            Some(r) if r.label == label => {
                r.windows += 1;
                Ok(None)
            }
            _ => {
                let closed = self.current.replace(PostureRun { label, windows: 1 });
                if let Some(r) = closed {
                    self.acc.add(r)?;
                }
                Ok(closed)
            }
        }
    }

    /// The run in progress.
    pub fn current(&self) -> Option<PostureRun> {
        self.current
    }

    pub fn finish(mut self) -> Result<ErgoReport> {
        if let Some(r) = self.current.take() {
            self.acc.add(r)?;
        }
        self.acc.finish()
    }
}

/// Ground truth (G) and model-based (I) values side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: PostureLabel,
    pub truth: LabelStats,
    pub predicted: LabelStats,
    pub level_agrees: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgoComparison {
    pub rows: Vec<ComparisonRow>,
}

impl ErgoComparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,breach_count_g,breach_count_i,breach_duration_g,breach_duration_i,max_hold_g,max_hold_i,\
             frequency_g,frequency_i,proportion_g,proportion_i,owas_g,owas_i,level_agrees\n",
        );
        let lvl = |l: Option<OwasLevel>| l.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let (g, i) = (&r.truth, &r.predicted);
            writeln!(
                s,
                "{},{},{},{:.1},{:.1},{:.1},{:.1},{:.4},{:.4},{:.4},{:.4},{},{},{}",
                r.label,
                g.breaches,
                i.breaches,
                g.breach_duration_s,
                i.breach_duration_s,
                g.max_hold_s,
                i.max_hold_s,
                g.frequency_per_min,
                i.frequency_per_min,
                g.proportion,
                i.proportion,
                lvl(g.owas),
                lvl(i.owas),
                r.level_agrees.map(|b| b.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }
}

pub fn compare_assessments(truth: &ErgoReport, predicted: &ErgoReport) -> Result<ErgoComparison> {
    let a: Vec<PostureLabel> = truth.rows.iter().map(|r| r.label).collect();
    let b: Vec<PostureLabel> = predicted.rows.iter().map(|r| r.label).collect();
    if a != b {
        return Err(Error::invalid("reports cover different label sets"));
    }
    let rows = truth
        .rows
        .iter()
        .zip(&predicted.rows)
        .map(|(g, i)| ComparisonRow {
            label: g.label,
            truth: g.clone(),
            predicted: i.clone(),
            level_agrees: match (g.owas, i.owas) {
                (None, None) => None,
                (x, y) => Some(x == y),
            },
        })
        .collect();
    Ok(ErgoComparison { rows })
}

/// Reads `window_start,label` lines. Starts must increase.
pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<(f64, PostureLabel)>> {
    let mut out: Vec<(f64, PostureLabel)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let line = line.trim();
        if i == 0 {
            if line != "window_start,label" {
                return Err(Error::Parse { line: 1, message: format!("expected header window_start,label, got {line:?}") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (t, l) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse { line: line_no, message: "expected two fields".into() })?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, message: format!("bad window start {t:?}") })?;
        let l: PostureLabel =
            l.trim().parse().map_err(|e: Error| Error::Parse { line: line_no, message: e.to_string() })?;
        if let Some(&(prev, _)) = out.last() {
            if !(t > prev) {
                return Err(Error::Parse { line: line_no, message: format!("window start {t} does not increase") });
            }
        }
        out.push((t, l));
    }
    if out.is_empty() {
        return Err(Error::invalid("prediction file has no rows"));
    }
    Ok(out)
}

pub fn predictions_csv(rows: &[(f64, PostureLabel)]) -> String {
    let mut s = String::from("window_start,label\n");
    for (t, l) in rows {
        writeln!(s, "{t},{l}").unwrap();
    }
    s
}
