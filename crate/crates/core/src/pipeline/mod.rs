//! Raw record streams to normalized, labeled motion images.

mod dataset;
mod label;
mod split;
mod stream;

pub use dataset::{
    merge_generalized, read_dataset, write_dataset, LabeledDataset, MotionImage,
};
pub use label::{parse_label_list, Comfort, PostureLabel};
pub use split::{stratified_shuffle_split, Split, SplitSpec};
pub use stream::{csv_header, read_csv, write_csv, SensorRecord, DEFAULT_CHANNELS, PLACEMENTS};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::{self, Purpose};

/// Overlap fractions supported by [`segment`].
pub const OVERLAPS: [f64; 2] = [0.0, 0.5];

/// Number of records per window, if `window_s * hz` is a positive integer.
pub fn window_len(window_s: f64, hz: u32) -> Result<usize> {
    let s = window_s * hz as f64;
    if !(s.is_finite() && s >= 1.0 - 1e-9 && (s - s.round()).abs() < 1e-9) {
        return Err(Error::invalid(format!(
            "window of {window_s} s at {hz} Hz is not a positive whole number of records"
        )));
    }
    Ok(s.round() as usize)
}

/// Splits a stream into consecutive windows of `window_s * hz` records that
/// advance by `S * (1 - overlap)` records. The trailing partial window is
/// dropped; a stream shorter than one window yields no windows.
pub fn segment(
    records: &[SensorRecord],
    window_s: f64,
    hz: u32,
    overlap: f64,
) -> Result<Vec<&[SensorRecord]>> {
    let s = window_len(window_s, hz)?;
    if !OVERLAPS.iter().any(|o| (o - overlap).abs() < 1e-12) {
        return Err(Error::invalid(format!("overlap must be 0 or 0.5, got {overlap}")));
    }
    let advance = s as f64 * (1.0 - overlap);
    if (advance - advance.round()).abs() > 1e-9 || advance < 1.0 {
        return Err(Error::invalid(format!(
            "window of {s} records cannot advance by a whole number of records at overlap {overlap}"
        )));
    }
    let advance = advance.round() as usize;
    if records.len() < s {
        return Ok(Vec::new());
    }
    Ok((0..=(records.len() - s) / advance)
        .map(|k| &records[k * advance..k * advance + s])
        .collect())
}

/// Keeps `target_hz` of every `source_hz` consecutive records, chosen
/// uniformly without replacement with order preserved. A trailing partial
/// second of `m` records keeps `floor(m * target / source)` of them.
pub fn downsample(
    records: &[SensorRecord],
    source_hz: u32,
    target_hz: u32,
    seed: u64,
) -> Result<Vec<SensorRecord>> {
    if source_hz == 0 || target_hz == 0 {
        return Err(Error::invalid("sampling rates must be positive"));
    }
    if target_hz > source_hz {
        return Err(Error::invalid(format!(
            "cannot downsample {source_hz} Hz to {target_hz} Hz"
        )));
    }
    let block = source_hz as usize;
    let mut out = Vec::with_capacity(records.len() * target_hz as usize / block + 1);
    for (b, chunk) in records.chunks(block).enumerate() {
        let keep = chunk.len() * target_hz as usize / block;
        let mut rng = rng::stream(seed, Purpose::Downsample, &[b as u64]);
        let mut picked = index::sample(&mut rng, chunk.len(), keep).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| chunk[i].clone()));
    }
    Ok(out)
}

/// Population z-score of each channel column. Constant columns map to zeros.
pub fn normalize(window: ArrayView2<f64>) -> Array2<f64> {
    let mut out = window.to_owned();
    let n = window.nrows() as f64;
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|x| (x - mean) / std);
        }
    }
    out
}

/// Majority label of a window. Ties go to the final record's label; if that
/// label is not among the tied ones, the tied label seen last wins.
pub fn label_window(records: &[SensorRecord]) -> Result<PostureLabel> {
    let last = records
        .last()
        .ok_or_else(|| Error::invalid("cannot label an empty window"))?;
    let mut counts = [0usize; 9];
    let mut last_seen = [0usize; 9];
    for (i, r) in records.iter().enumerate() {
        let l = r
            .label
            .ok_or_else(|| Error::invalid(format!("unlabeled record at t={}", r.t)))?;
        counts[l.index()] += 1;
        last_seen[l.index()] = i;
    }
    let best = *counts.iter().max().unwrap();
    let final_label = last.label.unwrap();
    if counts[final_label.index()] == best {
        return Ok(final_label);
    }
    let idx = (0..9)
        .filter(|&i| counts[i] == best)
        .max_by_key(|&i| last_seen[i])
        .unwrap();
    Ok(PostureLabel::ALL[idx])
}

/// Raw S×D grid of a window.
pub fn window_matrix(records: &[SensorRecord]) -> Array2<f64> {
    let d = records.first().map_or(0, |r| r.values.len());
    Array2::from_shape_fn((records.len(), d), |(s, c)| records[s].values[c])
}

/// Segment, label and normalize a whole stream into a dataset.
pub fn build_dataset(
    subject: &str,
    records: &[SensorRecord],
    window_s: f64,
    hz: u32,
    overlap: f64,
    exec: Execution,
) -> Result<LabeledDataset> {
    let channels = records.first().map_or(DEFAULT_CHANNELS, |r| r.values.len());
    if let Some(bad) = records.iter().find(|r| r.values.len() != channels) {
        return Err(Error::invalid(format!(
            "record at t={} has {} channels, expected {channels}",
            bad.t,
            bad.values.len()
        )));
    }
    let windows = segment(records, window_s, hz, overlap)?;
    let labels = windows
        .iter()
        .map(|w| label_window(w))
        .collect::<Result<Vec<_>>>()?;
    let images = exec.map(windows.len(), |i| {
        let w = windows[i];
        MotionImage {
            data: normalize(window_matrix(w).view()),
            label: labels[i],
            start: w[0].t,
        }
    });
    Ok(LabeledDataset {
        subject: subject.to_string(),
        steps: window_len(window_s, hz)?,
        channels,
        images,
    })
}
