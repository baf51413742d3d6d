//! Deterministic synthetic posture streams.
//!
//! Each posture class has a signature: per channel, a base offset and a
//! sinusoid (frequency, phase) plus Gaussian noise. Channels come in groups of
//! three (one sensor unit); the three channels of a group share a frequency.
//! Per-window normalization removes offsets and scale, so class identity that
//! survives preprocessing lives in the group frequencies and intra-group
//! phase relations. Offsets still separate classes in raw space, which is what
//! nearest-centroid style oracles look at.
//!
//! Streams are reproducible bit for bit: label sequencing and signal noise use
//! independent ChaCha8 sub-streams of the caller's seed.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::container::short_hash;
use crate::error::{Error, Result};
use crate::pipeline::{PostureLabel, SensorRecord, PLACEMENTS};
use crate::rng::{self, Purpose};

/// Frequencies signatures draw from, Hz. All are below the 10 Hz Nyquist
/// limit of the slowest supported rate (20 Hz).
pub const FREQUENCY_GRID: [f64; 12] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.5];
const MIN_FREQ: f64 = 0.25;
const MAX_FREQ: f64 = 9.5;

pub const CHANNELS_PER_GROUP: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub label: PostureLabel,
    pub offsets: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl ClassSignature {
    pub fn channels(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    fn value(&self, c: usize, t: f64, shift: f64) -> f64 {
        self.offsets[c] + self.amplitude * (2.0 * PI * self.frequencies[c] * t + self.phases[c] + shift).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub id: String,
    pub signatures: Vec<ClassSignature>,
    /// Magnitude of the perturbation this profile was derived with.
    pub drift: f64,
    /// Label sampling weights for successive posture segments; sums to 1.
    pub mix: Vec<(PostureLabel, f64)>,
    /// Mean length of a continuous posture segment, seconds.
    pub dwell_s: f64,
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.mix.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.mix.iter().any(|(_, p)| *p < 0.0) {
            return Err(Error::invalid(format!("posture mix sums to {total}, expected 1")));
        }
        if !(self.dwell_s > 0.0) {
            return Err(Error::invalid("dwell must be positive"));
        }
        let channels = self.channels();
        for (l, p) in &self.mix {
            if *p > 0.0 && self.signature(*l).is_none() {
                return Err(Error::invalid(format!("no signature for mixed label {l}")));
            }
        }
        for s in &self.signatures {
            if s.channels() != channels || s.frequencies.len() != channels || s.phases.len() != channels {
                return Err(Error::invalid(format!("signature {} has inconsistent channels", s.label)));
            }
            if !(s.noise_std >= 0.0) {
                return Err(Error::invalid("noise std must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.signatures.first().map_or(0, ClassSignature::channels)
    }

    pub fn signature(&self, label: PostureLabel) -> Option<&ClassSignature> {
        self.signatures.iter().find(|s| s.label == label)
    }

    pub fn labels(&self) -> Vec<PostureLabel> {
        self.mix.iter().filter(|(_, p)| *p > 0.0).map(|(l, _)| *l).collect()
    }

    /// Textual encoding of every parameter; the manifest stores its hash.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("id={};drift={};dwell={};mix=", self.id, self.drift, self.dwell_s);
        for (l, p) in &self.mix {
            let _ = write!(s, "{l}:{p},");
        }
        for sig in &self.signatures {
            let _ = write!(s, ";{}:a={}:n={}", sig.label, sig.amplitude, sig.noise_std);
            for c in 0..sig.channels() {
                let _ = write!(s, ":{},{},{}", sig.offsets[c], sig.frequencies[c], sig.phases[c]);
            }
        }
        s
    }

    pub fn fingerprint_hash(&self) -> String {
        short_hash(&self.fingerprint())
    }

    /// Key=value lines describing this profile for a stream manifest.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let first = self.signatures.first();
        vec![
            ("profile.labels".into(), self.labels().iter().map(|l| l.code()).collect::<Vec<_>>().join(",")),
            (
                "profile.mix".into(),
                self.mix.iter().map(|(l, p)| format!("{l}:{p}")).collect::<Vec<_>>().join(","),
            ),
            ("profile.dwell_s".into(), self.dwell_s.to_string()),
            ("profile.drift".into(), self.drift.to_string()),
            ("profile.amplitude".into(), first.map_or(0.0, |s| s.amplitude).to_string()),
            ("profile.noise_std".into(), first.map_or(0.0, |s| s.noise_std).to_string()),
            ("profile.hash".into(), self.fingerprint_hash()),
        ]
    }
}

/// Names of the sensor groups for `channels` channels: `<placement>_acc` and
/// `<placement>_gyro` per placement, three channels each.
pub fn group_names(channels: usize) -> Vec<String> {
    (0..channels.div_ceil(CHANNELS_PER_GROUP))
        .map(|g| {
            let placement = PLACEMENTS.get(g / 2).copied().unwrap_or("extra");
            let unit = if g % 2 == 0 { "acc" } else { "gyro" };
            format!("{placement}_{unit}")
        })
        .collect()
}

/// Builds a base subject profile with random class signatures.
#[derive(Debug, Clone)]
pub struct ProfileBuilder {
    pub labels: Vec<PostureLabel>,
    pub channels: usize,
    /// Groups whose signal depends on the class; `None` means all groups.
    pub informative_groups: Option<Vec<usize>>,
    pub amplitude: f64,
    pub noise_std: f64,
    pub offset_spread: f64,
    pub dwell_s: f64,
}

impl ProfileBuilder {
    pub fn new(labels: &[PostureLabel], channels: usize) -> Self {
        ProfileBuilder {
            labels: labels.to_vec(),
            channels,
            informative_groups: None,
            amplitude: 1.0,
            noise_std: 0.3,
            offset_spread: 2.0,
            dwell_s: 20.0,
        }
    }

    pub fn build(&self, id: &str, seed: u64) -> Result<SubjectProfile> {
        if self.labels.is_empty() || self.channels == 0 {
            return Err(Error::invalid("profile needs at least one label and one channel"));
        }
        let groups = self.channels.div_ceil(CHANNELS_PER_GROUP);
        if self.labels.len() > FREQUENCY_GRID.len() {
            return Err(Error::invalid("more labels than distinct signature frequencies"));
        }
        let informative: Vec<bool> = (0..groups)
            .map(|g| self.informative_groups.as_ref().map_or(true, |v| v.contains(&g)))
            .collect();
        if let Some(v) = &self.informative_groups {
            if let Some(bad) = v.iter().find(|&&g| g >= groups) {
                return Err(Error::invalid(format!("informative group {bad} out of range")));
            }
        }
        let mut rng = rng::stream(seed, Purpose::Profile, &[]);
        let k = self.labels.len();
        // freq[g][label]: a distinct grid frequency per class within each group.
        let mut freq = vec![vec![0.0; k]; groups];
        for f in freq.iter_mut() {
            let mut grid = FREQUENCY_GRID.to_vec();
            grid.shuffle(&mut rng);
            f.copy_from_slice(&grid[..k]);
        }
        let shared_freq: Vec<f64> = (0..groups).map(|_| *FREQUENCY_GRID.choose(&mut rng).unwrap()).collect();
        let shared_offset: Vec<f64> = (0..self.channels)
            .map(|_| rng.gen_range(-self.offset_spread..=self.offset_spread))
            .collect();
        let shared_phase: Vec<f64> = (0..self.channels).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

        let signatures = self
            .labels
            .iter()
            .enumerate()
            .map(|(li, &label)| {
                let mut sig = ClassSignature {
                    label,
                    offsets: Vec::with_capacity(self.channels),
                    frequencies: Vec::with_capacity(self.channels),
                    phases: Vec::with_capacity(self.channels),
                    amplitude: self.amplitude,
                    noise_std: self.noise_std,
                };
                for c in 0..self.channels {
                    let g = c / CHANNELS_PER_GROUP;
                    if informative[g] {
                        sig.offsets.push(rng.gen_range(-self.offset_spread..=self.offset_spread));
                        sig.frequencies.push(freq[g][li]);
                        sig.phases.push(rng.gen_range(0.0..2.0 * PI));
                    } else {
                        sig.offsets.push(shared_offset[c]);
                        sig.frequencies.push(shared_freq[g]);
                        sig.phases.push(shared_phase[c]);
                    }
                }
                sig
            })
            .collect();
        let p = 1.0 / k as f64;
        let profile = SubjectProfile {
            id: id.to_string(),
            signatures,
            drift: 0.0,
            mix: self.labels.iter().map(|&l| (l, p)).collect(),
            dwell_s: self.dwell_s,
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// Perturbs a profile to simulate another subject. Offsets move by
/// `drift_scale` standard normals, phases by `drift_scale * π` normals and
/// each group frequency by a log-normal factor with σ = `drift_scale / 2`
/// (clamped to 0.25–9.5 Hz). Zero drift returns an identical generator.
pub fn derive_subject(base: &SubjectProfile, drift_scale: f64, seed: u64) -> Result<SubjectProfile> {
    if !(drift_scale >= 0.0) || !drift_scale.is_finite() {
        return Err(Error::invalid(format!("drift scale must be >= 0, got {drift_scale}")));
    }
    let mut rng = rng::stream(seed, Purpose::Drift, &[]);
    let mut out = base.clone();
    out.id = format!("{}~{seed}", base.id);
    out.drift = drift_scale;
    for sig in &mut out.signatures {
        let channels = sig.channels();
        for g in 0..channels.div_ceil(CHANNELS_PER_GROUP) {
            let z: f64 = StandardNormal.sample(&mut rng);
            let factor = (0.5 * drift_scale * z).exp();
            for c in g * CHANNELS_PER_GROUP..((g + 1) * CHANNELS_PER_GROUP).min(channels) {
                if drift_scale > 0.0 {
                    sig.frequencies[c] = (sig.frequencies[c] * factor).clamp(MIN_FREQ, MAX_FREQ);
                }
            }
        }
        for c in 0..channels {
            let zo: f64 = StandardNormal.sample(&mut rng);
            let zp: f64 = StandardNormal.sample(&mut rng);
            sig.offsets[c] += drift_scale * zo;
            sig.phases[c] += drift_scale * PI * zp;
        }
    }
    Ok(out)
}

/// Generates `duration_s * hz` labeled records.
///
/// Posture segments last `U(0.5, 1.5) * dwell_s` seconds; each next segment
/// label is drawn from the mix with the previous label excluded (when another
/// label is available), so runs of equal labels average `dwell_s`.
pub fn generate_stream(
    profile: &SubjectProfile,
    duration_s: f64,
    hz: u32,
    channels: usize,
    seed: u64,
) -> Result<Vec<SensorRecord>> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
    }
    if hz == 0 {
        return Err(Error::invalid("sampling rate must be positive"));
    }
    profile.validate()?;
    if profile.channels() != channels {
        return Err(Error::invalid(format!(
            "profile has {} channels, {channels} requested",
            profile.channels()
        )));
    }
    let nyquist = hz as f64 / 2.0;
    for sig in &profile.signatures {
        if let Some(f) = sig.frequencies.iter().find(|&&f| f >= nyquist) {
            return Err(Error::invalid(format!(
                "signature {} has a {f} Hz component at or above Nyquist ({nyquist} Hz)",
                sig.label
            )));
        }
    }

    let n = (duration_s * hz as f64).round() as usize;
    let segments = label_sequence(profile, n, hz, seed);
    let mut noise_rng = rng::stream(seed, Purpose::SignalNoise, &[]);
    // Each bout starts every sensor group at an independent random phase, so
    // phase relations across groups carry no class information.
    let mut phase_rng = rng::stream(seed, Purpose::SignalNoise, &[1]);
    let groups = channels.div_ceil(CHANNELS_PER_GROUP);
    let mut records = Vec::with_capacity(n);
    for (label, len) in segments {
        let sig = profile.signature(label).expect("validated");
        let noise = Normal::new(0.0, sig.noise_std).expect("validated");
        let shifts: Vec<f64> = (0..groups).map(|_| phase_rng.gen_range(0.0..2.0 * PI)).collect();
        for _ in 0..len {
            let t = records.len() as f64 / hz as f64;
            let values = (0..channels)
                .map(|c| {
                    let e = if sig.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                    sig.value(c, t, shifts[c / CHANNELS_PER_GROUP]) + e
                })
                .collect();
            records.push(SensorRecord { t, values, label: Some(label) });
        }
    }
    Ok(records)
}

/// Posture bouts as `(label, records)`, covering exactly `n` records.
fn label_sequence(profile: &SubjectProfile, n: usize, hz: u32, seed: u64) -> Vec<(PostureLabel, usize)> {
    let mut rng = rng::stream(seed, Purpose::Dwell, &[]);
    let options: Vec<(PostureLabel, f64)> =
        profile.mix.iter().copied().filter(|(_, p)| *p > 0.0).collect();
    let mut out = Vec::new();
    let mut filled = 0;
    let mut prev: Option<PostureLabel> = None;
    while filled < n {
        let candidates: Vec<(PostureLabel, f64)> = if options.len() > 1 {
            options.iter().copied().filter(|(l, _)| Some(*l) != prev).collect()
        } else {
            options.clone()
        };
        let total: f64 = candidates.iter().map(|(_, p)| p).sum();
        let mut u = rng.gen_range(0.0..total);
        let mut label = candidates[candidates.len() - 1].0;
        for (l, p) in &candidates {
            if u < *p {
                label = *l;
                break;
            }
            u -= p;
        }
        let len = (rng.gen_range(0.5..1.5) * profile.dwell_s * hz as f64).round().max(1.0) as usize;
        let len = len.min(n - filled);
        out.push((label, len));
        filled += len;
        prev = Some(label);
    }
    out
}
