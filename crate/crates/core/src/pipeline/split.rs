//! Stratified random shuffle splitting into training/validation/test.
//!
//! Per-class part sizes come from a controlled rounding of the proportional
//! allocation `n_c * |part| / N`: every cell is its floor or ceiling while all
//! class totals and part sizes are hit exactly. Hence each part's class
//! fraction is within `1/|part|` of the dataset's.

use rand::seq::SliceRandom;

use super::dataset::LabeledDataset;
use super::label::PostureLabel;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Share of the dataset held out for testing (9:1 → 0.1).
    pub test_fraction: f64,
    /// Share of the remainder used for validation (8:2 → 0.2).
    pub validation_fraction: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.1, validation_fraction: 0.2, rounds: 5, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("test", self.test_fraction), ("validation", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!("{name} fraction must be in (0,1), got {f}")));
            }
        }
        if self.rounds == 0 {
            return Err(Error::invalid("at least one round is required"));
        }
        Ok(())
    }

    /// Smallest share of the dataset any part receives.
    fn min_fraction(&self) -> f64 {
        let rest = 1.0 - self.test_fraction;
        self.test_fraction
            .min(rest * self.validation_fraction)
            .min(rest * (1.0 - self.validation_fraction))
    }
}

/// Indices into the source dataset, each part sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub training: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn stratified_shuffle_split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    let n = ds.len();
    let min_per_class = (1.0 / spec.min_fraction() - 1e-9).ceil() as usize;
    let mut by_class: Vec<(PostureLabel, Vec<usize>)> = Vec::new();
    for (i, img) in ds.images.iter().enumerate() {
        match by_class.iter_mut().find(|(l, _)| *l == img.label) {
            Some((_, v)) => v.push(i),
            None => by_class.push((img.label, vec![i])),
        }
    }
    by_class.sort_by_key(|(l, _)| *l);
    for (label, idx) in &by_class {
        if idx.len() < min_per_class {
            return Err(Error::invalid(format!(
                "class {label} has {} samples, stratified splitting needs at least {min_per_class}",
                idx.len()
            )));
        }
    }
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }

    let test = (n as f64 * spec.test_fraction).round() as usize;
    let validation = ((n - test) as f64 * spec.validation_fraction).round() as usize;
    let parts = [test, validation, n - test - validation];
    let class_sizes: Vec<usize> = by_class.iter().map(|(_, v)| v.len()).collect();
    let table = controlled_rounding(&class_sizes, &parts);

    Ok((0..spec.rounds)
        .map(|round| {
            let mut split = Split { training: vec![], validation: vec![], test: vec![] };
            for (c, (label, idx)) in by_class.iter().enumerate() {
                let mut shuffled = idx.clone();
                let mut rng =
                    rng::stream(spec.seed, Purpose::Split, &[round as u64, label.index() as u64]);
                shuffled.shuffle(&mut rng);
                let [t, v, _] = table[c];
                split.test.extend_from_slice(&shuffled[..t]);
                split.validation.extend_from_slice(&shuffled[t..t + v]);
                split.training.extend_from_slice(&shuffled[t + v..]);
            }
            split.training.sort_unstable();
            split.validation.sort_unstable();
            split.test.sort_unstable();
            split
        })
        .collect())
}

/// Rounds `rows[c] * cols[k] / N` to floor or ceiling per cell so that row
/// and column sums are preserved. Such a rounding always exists for integer
/// margins; it is found as a max-flow over the fractional cells.
fn controlled_rounding(rows: &[usize], cols: &[usize; 3]) -> Vec<[usize; 3]> {
    let total: usize = rows.iter().sum();
    let mut table = vec![[0usize; 3]; rows.len()];
    let mut frac = vec![[0f64; 3]; rows.len()];
    for (c, &r) in rows.iter().enumerate() {
        for k in 0..3 {
            let exact = r as f64 * cols[k] as f64 / total as f64;
            let fl = (exact + 1e-9).floor();
            table[c][k] = fl as usize;
            frac[c][k] = exact - fl;
        }
    }
    let mut row_need: Vec<usize> = rows
        .iter()
        .zip(&table)
        .map(|(&r, t)| r - t.iter().sum::<usize>())
        .collect();
    let mut col_need = [0usize; 3];
    for k in 0..3 {
        col_need[k] = cols[k] - table.iter().map(|t| t[k]).sum::<usize>();
    }
    // Unit-capacity edges for fractional cells, preferring large remainders.
    let mut used = vec![[false; 3]; rows.len()];
    let order = |c: usize| -> Vec<usize> {
        let mut ks: Vec<usize> = (0..3).filter(|&k| frac[c][k] > 1e-9).collect();
        ks.sort_by(|&a, &b| frac[c][b].partial_cmp(&frac[c][a]).unwrap().then(a.cmp(&b)));
        ks
    };
    let orders: Vec<Vec<usize>> = (0..rows.len()).map(order).collect();

    // Augmenting paths: row -> col (unused edge) -> row (used edge) -> ...
    fn augment(
        row: usize,
        orders: &[Vec<usize>],
        used: &mut [[bool; 3]],
        col_need: &mut [usize; 3],
        seen_rows: &mut [bool],
    ) -> bool {
        seen_rows[row] = true;
        for &k in &orders[row] {
            if used[row][k] {
                continue;
            }
            if col_need[k] > 0 {
                col_need[k] -= 1;
                used[row][k] = true;
                return true;
            }
            // Column is saturated; try rerouting one of its units elsewhere.
            for other in 0..used.len() {
                if other != row && used[other][k] && !seen_rows[other] {
                    used[other][k] = false;
                    if augment(other, orders, used, col_need, seen_rows) {
                        used[row][k] = true;
                        return true;
                    }
                    used[other][k] = true;
                }
            }
        }
        false
    }

    for c in 0..rows.len() {
        while row_need[c] > 0 {
            let mut seen = vec![false; rows.len()];
            if !augment(c, &orders, &mut used, &mut col_need, &mut seen) {
                break;
            }
            row_need[c] -= 1;
        }
    }
    for c in 0..rows.len() {
        for k in 0..3 {
            if used[c][k] {
                table[c][k] += 1;
            }
        }
    }
    debug_assert!(row_need.iter().all(|&r| r == 0));
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{MotionImage, PostureLabel::*};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn dataset(counts: &[(PostureLabel, usize)]) -> LabeledDataset {
        let mut d = LabeledDataset::new("S", 1, 1);
        for &(l, n) in counts {
            for _ in 0..n {
                d.push(MotionImage { data: Array2::zeros((1, 1)), label: l, start: 0.0 }).unwrap();
            }
        }
        d
    }

    fn count(ds: &LabeledDataset, idx: &[usize], l: PostureLabel) -> usize {
        idx.iter().filter(|&&i| ds.images[i].label == l).count()
    }

    #[test]
    fn seventy_thirty_test_counts() {
        let ds = dataset(&[(BT, 70), (ST, 30)]);
        let spec = SplitSpec { rounds: 1, seed: 1, ..Default::default() };
        let s = &stratified_shuffle_split(&ds, &spec).unwrap()[0];
        assert_eq!(count(&ds, &s.test, BT), 7);
        assert_eq!(count(&ds, &s.test, ST), 3);
        assert_eq!(s.validation.len(), 18);
        assert_eq!(s.training.len(), 72);
    }

    #[test]
    fn partition_and_determinism() {
        let ds = dataset(&[(BT, 23), (KN, 41), (ST, 17)]);
        let spec = SplitSpec { rounds: 3, seed: 9, ..Default::default() };
        let a = stratified_shuffle_split(&ds, &spec).unwrap();
        assert_eq!(a, stratified_shuffle_split(&ds, &spec).unwrap());
        assert_ne!(a[0], a[1]);
        for s in &a {
            let mut all: Vec<usize> =
                s.training.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn small_class_rejected_by_name() {
        let ds = dataset(&[(BT, 50), (WO, 9)]);
        let err = stratified_shuffle_split(&ds, &SplitSpec::default()).unwrap_err();
        assert!(err.to_string().contains("WO"));
    }

    proptest! {
        #[test]
        fn stratification_bound(counts in proptest::collection::vec(10usize..120, 1..9)) {
            let pairs: Vec<(PostureLabel, usize)> =
                counts.iter().enumerate().map(|(i, &n)| (PostureLabel::ALL[i], n)).collect();
            let ds = dataset(&pairs);
            let spec = SplitSpec { rounds: 1, seed: 3, ..Default::default() };
            let s = &stratified_shuffle_split(&ds, &spec).unwrap()[0];
            let n = ds.len() as f64;
            for part in [&s.training, &s.validation, &s.test] {
                prop_assert!(!part.is_empty());
                let p = part.len() as f64;
                for &(l, nc) in &pairs {
                    let dev = (count(&ds, part, l) as f64 / p - nc as f64 / n).abs();
                    prop_assert!(dev <= 1.0 / p + 1e-12, "class {} dev {} > 1/{}", l, dev, p);
                }
            }
        }
    }
}
