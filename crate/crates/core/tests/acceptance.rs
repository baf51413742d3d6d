//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line; exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cln_posture::ergo::{assess, run_length_encode, ErgoThresholds, OwasLevel, PostureRun, OWAS_LABELS};
use cln_posture::incremental::{adapt, run_mto_sweep, split_subject, IlConfig, SubjectSplit};
use cln_posture::metrics::{performance_change, performance_change_raw, permutation_importance, ChannelGroup};
use cln_posture::nn::gradcheck;
use cln_posture::nn::{Architecture, ClnModel, Padding};
use cln_posture::par::Execution;
use cln_posture::pipeline::{
    build_dataset, label_window, merge_generalized, segment, stratified_shuffle_split, window_matrix, LabeledDataset,
    PostureLabel, SplitSpec,
};
use cln_posture::synth::{derive_subject, generate_stream, ProfileBuilder, SubjectProfile};
use cln_posture::trainer::{evaluate, train, TrainConfig, LR1, LR2, LR3};

use PostureLabel::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn subject(base: &SubjectProfile, drift: f64, seed: u64, duration: f64, hz: u32, overlap: f64) -> LabeledDataset {
    let p = derive_subject(base, drift, seed).unwrap();
    let rec = generate_stream(&p, duration, hz, 30, seed.wrapping_add(1000)).unwrap();
    build_dataset(&format!("S{seed}"), &rec, 1.0, hz, overlap, Execution::default()).unwrap()
}

fn small_arch(hz: u32) -> Architecture {
    Architecture { kernels: 8, hidden: 16, steps: hz as usize, ..Architecture::full_size(1) }
}

// 1 ---------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for n in [1, 2] {
        let arch = Architecture {
            steps: 8,
            channels: 4,
            conv_layers: n,
            kernels: 3,
            kernel_h: 3,
            kernel_w: 4,
            padding: Padding::Same,
            lstm_layers: 2,
            hidden: 5,
            dropout: 0.5,
        };
        let model = ClnModel::new(arch, vec![BT, KN, ST], 40 + n as u64).map_err(fmt_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let image = Array2::from_shape_fn((8, 4), |_| rng.gen_range(-1.5..1.5));
        for label in 0..3 {
            let r = gradcheck::check(&model, image.view(), label, 9 + label as u64, 1e-4).map_err(fmt_err)?;
            worst = worst.max(r.worst_error);
            checked += r.checked;
            ensure(r.passed, || format!("N={n} label={label}: {} off by {:.3e}", r.worst_param, r.worst_error))?;
        }
    }
    let t = started.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("{checked} partials, worst relative error {worst:.2e}, {:.1}s", t.as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

fn nearest_centroid_accuracy(windows: &[(Array2<f64>, PostureLabel)]) -> f64 {
    let mut sums: BTreeMap<PostureLabel, (Array2<f64>, usize)> = BTreeMap::new();
    for (x, l) in windows.iter().step_by(2) {
        let e = sums.entry(*l).or_insert_with(|| (Array2::zeros(x.raw_dim()), 0));
        e.0 += x;
        e.1 += 1;
    }
    let centroids: Vec<(PostureLabel, Array2<f64>)> = sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    let (mut hit, mut n) = (0, 0);
    for (x, l) in windows.iter().skip(1).step_by(2) {
        let d = |c: &Array2<f64>| (c - x).mapv(|v| v * v).sum();
        let best = centroids.iter().min_by(|a, b| d(&a.1).total_cmp(&d(&b.1))).unwrap();
        hit += usize::from(best.0 == *l);
        n += 1;
    }
    hit as f64 / n as f64
}

fn end_to_end_training() -> Outcome {
    let started = Instant::now();
    let hz = 20;
    let labels = [BT, KN, LB, SQ, ST, WK, WO];
    let base = ProfileBuilder::new(&labels, 30).build("base", 1).map_err(fmt_err)?;
    let exec = Execution::default();
    let mut parts = Vec::new();
    let mut raw = Vec::new();
    for s in 0..7u64 {
        let p = derive_subject(&base, 0.05, 100 + s).map_err(fmt_err)?;
        let rec = generate_stream(&p, 1200.0, hz, 30, 200 + s).map_err(fmt_err)?;
        for w in segment(&rec, 1.0, hz, 0.0).map_err(fmt_err)? {
            raw.push((window_matrix(w), label_window(w).map_err(fmt_err)?));
        }
        parts.push(build_dataset(&p.id, &rec, 1.0, hz, 0.0, exec).map_err(fmt_err)?);
    }
    let oracle = nearest_centroid_accuracy(&raw);
    ensure(oracle >= 0.98, || format!("nearest-centroid oracle only {oracle:.4}; noise miscalibrated"))?;
    let ds = merge_generalized(&parts, &Default::default()).map_err(fmt_err)?;
    let sp = &stratified_shuffle_split(&ds, &SplitSpec { rounds: 1, seed: 1, ..Default::default() }).map_err(fmt_err)?[0];
    // desk preset: 16 kernels of 5x30, 32 LSTM units, at most 30 epochs
    let arch = Architecture { kernels: 16, hidden: 32, steps: hz as usize, ..Architecture::full_size(1) };
    let cfg = TrainConfig { lr: 1e-3, batch: 32, epochs: 30, seed: 3, stop_at_val_f1: Some(0.99), ..Default::default() };
    let (model, history) = train(&arch, &ds.subset(&sp.training), &ds.subset(&sp.validation), &cfg, exec).map_err(fmt_err)?;
    let (_, f1) = evaluate(&model, &ds.subset(&sp.test), exec).map_err(fmt_err)?;
    let t = started.elapsed();
    let summary = format!(
        "oracle {oracle:.4}, {} windows, test macro F1 {f1:.4} after {} epochs, {:.0}s",
        ds.len(),
        history.epochs.len(),
        t.as_secs_f64()
    );
    ensure(f1 >= 0.95, || format!("held-out F1 too low: {summary}"))?;
    ensure(t < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

// 3 ---------------------------------------------------------------------

fn adaptation_gain() -> Outcome {
    let hz = 20;
    let exec = Execution::default();
    let labels = [BT, KN, SQ, ST, WO];
    let mut gains = Vec::new();
    for seed in 0..3u64 {
        let mut b = ProfileBuilder::new(&labels, 30);
        b.dwell_s = 10.0;
        let base = b.build("base", 10 + seed).map_err(fmt_err)?;
        let source = subject(&base, 0.0, 1, 600.0, hz, 0.0);
        let target = subject(&base, 1.5, 2, 300.0, hz, 0.0);
        let spec = SplitSpec { rounds: 1, seed, ..Default::default() };
        let sp = &stratified_shuffle_split(&source, &spec).map_err(fmt_err)?[0];
        let cfg = TrainConfig { lr: 1e-3, batch: 32, epochs: 10, seed, ..Default::default() };
        let (m, _) = train(&small_arch(hz), &source.subset(&sp.training), &source.subset(&sp.validation), &cfg, exec)
            .map_err(fmt_err)?;
        let parts = split_subject(&target, &SubjectSplit::Stratified(spec)).map_err(fmt_err)?;
        let pre = evaluate(&m, &parts.test, exec).map_err(fmt_err)?.1;
        let (a, _) = adapt(&m, &parts.train, &parts.val, &cfg, exec).map_err(fmt_err)?;
        let post = evaluate(&a, &parts.test, exec).map_err(fmt_err)?.1;
        gains.push((pre, post));
    }
    let mean = gains.iter().map(|(a, b)| b - a).sum::<f64>() / gains.len() as f64;
    let detail = gains.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect::<Vec<_>>().join(", ");
    ensure(mean >= 0.20, || format!("mean gain {mean:.3} ({detail})"))?;
    Ok(format!("mean gain {mean:.3} ({detail})"))
}

// 4 ---------------------------------------------------------------------

fn lr_forgetting_trend() -> Outcome {
    let hz = 20;
    let exec = Execution::default();
    let labels = [BT, KN, SQ, ST, WO];
    let rates = [LR1, LR2, LR3];
    let mut drops = [0.0; 3];
    for seed in 0..3u64 {
        let mut b = ProfileBuilder::new(&labels, 30);
        b.dwell_s = 10.0;
        let base = b.build("base", 20 + seed).map_err(fmt_err)?;
        let subjects: Vec<_> = (0..4).map(|k| subject(&base, 0.8, 100 * seed + k, 360.0, hz, 0.0)).collect();
        let cfg = TrainConfig { lr: LR2, batch: 32, epochs: 10, seed, ..Default::default() };
        let mut il = IlConfig::new(small_arch(hz), cfg.clone(), cfg.clone());
        il.split = SubjectSplit::Stratified(SplitSpec { rounds: 1, seed, ..Default::default() });
        let adapts: Vec<_> = rates.iter().map(|&lr| TrainConfig { lr, epochs: 5, ..cfg.clone() }).collect();
        let reports = run_mto_sweep(&subjects, &il, &adapts, exec).map_err(fmt_err)?;
        for (k, r) in reports.iter().enumerate() {
            ensure(r.is_valid(), || format!("seed {seed}: {}", r.error.clone().unwrap_or_default()))?;
            drops[k] -= r.mean_forgetting_change().ok_or("missing forgetting change")? / 3.0;
        }
    }
    let summary = format!("forgetting drop LR1 {:.1} / LR2 {:.1} / LR3 {:.1} points", drops[0], drops[1], drops[2]);
    ensure(drops[0] >= drops[1] && drops[1] >= drops[2], || format!("not monotone: {summary}"))?;
    ensure(drops[0] - drops[2] >= 5.0, || format!("spread under 5 points: {summary}"))?;
    Ok(summary)
}

// 5 ---------------------------------------------------------------------

fn published_change_arithmetic() -> Outcome {
    // (macro F1, baseline, printed change %)
    let cells: [(f64, f64, f64); 24] = [
        (0.808, 0.828, -2.4),
        (0.422, 0.828, -49.0),
        (0.812, 0.828, -1.9),
        (0.516, 0.828, -37.7),
        (0.682, 0.828, -17.6),
        (0.535, 0.828, -35.4),
        (0.793, 0.829, -4.3),
        (0.393, 0.829, -52.6),
        (0.815, 0.829, -1.7),
        (0.454, 0.829, -45.2),
        (0.710, 0.829, -14.4),
        (0.507, 0.829, -38.8),
        (0.831, 0.839, -1.0),
        (0.589, 0.868, -32.2),
        (0.730, 0.839, -13.0),
        (0.739, 0.868, -14.8),
        (0.523, 0.839, -37.6),
        (0.814, 0.868, -6.3),
        (0.829, 0.849, -2.4),
        (0.503, 0.868, -42.1),
        (0.691, 0.849, -18.5),
        (0.732, 0.868, -15.7),
        (0.494, 0.849, -41.8),
        (0.791, 0.868, -8.9),
    ];
    let mut worst: f64 = 0.0;
    for (f1, base, printed) in cells {
        let raw = performance_change_raw(f1, base).map_err(fmt_err)?;
        let rounded = performance_change(f1, base).map_err(fmt_err)?;
        let err = (raw - printed).abs().max((rounded - printed).abs());
        worst = worst.max(err);
        ensure(err <= 0.15, || format!("({f1}, {base}) -> {raw:.3}% vs printed {printed}%"))?;
    }
    Ok(format!("{} cells, worst deviation {worst:.3} points", cells.len()))
}

// 6 ---------------------------------------------------------------------

/// Per-label result row of the reference procedure.
#[derive(Debug)]
struct OracleRow {
    breach_count: usize,
    breach_duration: f64,
    frequency: f64,
    proportion: f64,
    max_hold: f64,
    bouts: usize,
}

/// Straight transcription of the tabular holding-time procedure: a
/// `count` table of (posture, consecutive windows), a derived duration
/// column, then per-class masks. Frequency divides by total minutes, and a
/// bout breaches when its duration exceeds the threshold.
fn reference_assessment(postures: &[PostureLabel], threshold: &BTreeMap<PostureLabel, f64>) -> BTreeMap<PostureLabel, OracleRow> {
    let n = postures.len();
    let mut count: Vec<(PostureLabel, usize, f64)> = vec![(postures[0], 1, 0.0)];
    let mut pointer = 0;
    for i in 0..n - 1 {
        if postures[i + 1] == postures[i] {
            count[pointer].1 += 1;
            count[pointer].0 = postures[i];
        } else {
            pointer += 1;
            count.push((postures[i + 1], 1, 0.0));
        }
    }
    for row in count.iter_mut() {
        row.2 = (row.1 as f64 + 1.0) * 0.5;
    }
    let total: f64 = count.iter().map(|r| r.2).sum();
    let mut result = BTreeMap::new();
    for (&class, &limit) in threshold {
        let held: Vec<f64> = count.iter().filter(|r| r.0 == class).map(|r| r.2).collect();
        if held.is_empty() {
            continue;
        }
        let sub_count: Vec<f64> = held.iter().copied().filter(|&d| d > limit).collect();
        result.insert(
            class,
            OracleRow {
                breach_count: sub_count.len(),
                breach_duration: sub_count.iter().sum(),
                frequency: held.len() as f64 / (total / 60.0),
                proportion: held.iter().sum::<f64>() / total,
                max_hold: held.iter().copied().fold(0.0, f64::max),
                bouts: held.len(),
            },
        );
    }
    result
}

fn reference_level(p: f64) -> OwasLevel {
    if p > 0.5 {
        OwasLevel::III
    } else if p > 0.2 {
        OwasLevel::II
    } else {
        OwasLevel::I
    }
}

fn ergonomics_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphabet: Vec<PostureLabel> = PostureLabel::ALL.iter().copied().filter(|&l| l != TR).collect();
    let scales = [0.05, 0.1, 0.5, 1.0];
    let mut breaches = 0;
    for case in 0..1000 {
        let th = ErgoThresholds::with_scale(scales[case % scales.len()]);
        let limits: BTreeMap<PostureLabel, f64> =
            alphabet.iter().map(|&l| (l, th.threshold(l).unwrap())).collect();
        let pool = &alphabet[..rng.gen_range(1..=alphabet.len())];
        let len = rng.gen_range(1..600);
        let stickiness = rng.gen_range(0.0..0.99);
        let mut seq = vec![pool[rng.gen_range(0..pool.len())]];
        while seq.len() < len {
            let next = if rng.gen_bool(stickiness) { *seq.last().unwrap() } else { pool[rng.gen_range(0..pool.len())] };
            seq.push(next);
        }
        let got = assess(&run_length_encode(&seq).map_err(fmt_err)?, &th).map_err(fmt_err)?;
        let want = reference_assessment(&seq, &limits);
        let total = (seq.len() as f64) * 0.5 + 0.5 * run_length_encode(&seq).unwrap().len() as f64;
        ensure((got.total_duration_s - total).abs() < 1e-9, || format!("case {case}: total duration"))?;
        let lb_present = want.contains_key(&LB);
        for row in &got.rows {
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
            match want.get(&row.label) {
                None => ensure(row.runs == 0 && row.breaches == 0 && row.total_duration_s == 0.0, || {
                    format!("case {case}: {} should be absent", row.label)
                })?,
                Some(w) => {
                    breaches += w.breach_count;
                    ensure(
                        row.runs == w.bouts
                            && row.breaches == w.breach_count
                            && close(row.breach_duration_s, w.breach_duration)
                            && close(row.frequency_per_min, w.frequency)
                            && close(row.proportion, w.proportion)
                            && close(row.max_hold_s, w.max_hold),
                        || format!("case {case}: {} differs: got {row:?}, want {w:?}", row.label),
                    )?;
                }
            }
            let graded = OWAS_LABELS.contains(&row.label) || (row.label == LB && lb_present);
            let want_level = graded.then(|| reference_level(want.get(&row.label).map_or(0.0, |w| w.proportion)));
            ensure(row.owas == want_level, || format!("case {case}: level of {}", row.label))?;
        }
    }
    let t = started.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    ensure(breaches > 0, || "no sequence exercised a breach".into())?;
    Ok(format!("1000 sequences agree ({breaches} breaches exercised), {:.2}s", t.as_secs_f64()))
}

// 7 ---------------------------------------------------------------------

fn owas_levels() -> Outcome {
    use OwasLevel::*;
    let th = ErgoThresholds::default();
    let table: [(f64, OwasLevel); 29] = [
        (15.4, I), (11.2, I), (21.1, II), (9.9, I), (0.0, I), (15.4, I), (12.3, I),
        (16.0, I), (14.7, I), (19.3, I), (8.1, I), (4.7, I), (15.4, I), (12.3, I),
        (57.1, III), (58.3, III), (2.9, I), (1.1, I),
        (37.3, II), (65.2, III), (95.8, III), (15.4, I), (0.0, I),
        (38.6, II), (52.8, III), (83.1, III), (20.5, II), (0.6, I),
        (20.0, I),
    ];
    for (pct, want) in table {
        let got = th.level(pct / 100.0);
        ensure(got == want, || format!("{pct}% -> {got}, expected {want}"))?;
    }
    // 20% exactly through the full assessment: 1 s of KN in 5 s total.
    let r = assess(&[PostureRun { label: KN, windows: 1 }, PostureRun { label: ST, windows: 7 }], &th).map_err(fmt_err)?;
    let kn = r.get(KN).unwrap();
    ensure(kn.proportion == 0.2 && kn.owas == Some(I), || format!("boundary run graded {:?} at {}", kn.owas, kn.proportion))?;
    Ok(format!("{} proportions graded as expected, 20.0% boundary -> I", table.len()))
}

// 8 ---------------------------------------------------------------------

fn duration_formula() -> Outcome {
    for n in 1..=500usize {
        let want = (n as f64 + 1.0) * 0.5;
        let run = PostureRun { label: SQ, windows: n };
        ensure(run.duration() == want, || format!("n={n}: {}", run.duration()))?;
        let r = assess(&run_length_encode(&vec![SQ; n]).map_err(fmt_err)?, &ErgoThresholds::default()).map_err(fmt_err)?;
        let sq = r.get(SQ).unwrap();
        ensure(sq.total_duration_s == want && sq.max_hold_s == want, || format!("n={n}: assessed {}", sq.total_duration_s))?;
    }
    Ok("n = 1..500 exact".into())
}

// 9 ---------------------------------------------------------------------

fn pipeline_counts() -> Outcome {
    let mut b = ProfileBuilder::new(&[BT, KN, ST, WO], 30);
    b.dwell_s = 5.0;
    let p = b.build("counts", 3).map_err(fmt_err)?;
    let rec = generate_stream(&p, 100.0, 40, 30, 4).map_err(fmt_err)?;
    ensure(rec.len() == 4000, || format!("{} records", rec.len()))?;
    let exec = Execution::default();
    let a = build_dataset("c", &rec, 1.0, 40, 0.0, exec).map_err(fmt_err)?;
    let b = build_dataset("c", &rec, 1.0, 40, 0.5, exec).map_err(fmt_err)?;
    ensure(a.len() == 100 && b.len() == 199, || format!("{} / {} windows", a.len(), b.len()))?;
    let mut worst: f64 = 0.0;
    for ds in [&a, &b] {
        let hist = ds.histogram();
        let splits = stratified_shuffle_split(ds, &SplitSpec { rounds: 5, seed: 8, ..Default::default() }).map_err(fmt_err)?;
        for sp in &splits {
            for part in [&sp.training, &sp.validation, &sp.test] {
                for (&label, &count) in &hist {
                    let have = part.iter().filter(|&&i| ds.images[i].label == label).count();
                    let gap = (have as f64 / part.len() as f64 - count as f64 / ds.len() as f64).abs();
                    worst = worst.max(gap * part.len() as f64);
                    ensure(gap <= 1.0 / part.len() as f64, || {
                        format!("{label}: {have}/{} vs {count}/{}", part.len(), ds.len())
                    })?;
                }
            }
        }
    }
    Ok(format!("100 and 199 windows; split class fractions within {worst:.2}/|part|"))
}

// 10 --------------------------------------------------------------------

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cln-posture"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(fmt_err)?;
    ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn full_run(dir: &Path) -> Result<(), String> {
    let common = [
        "--seed", "11", "--hz", "20", "--labels", "BT,KN,ST", "--dwell", "10", "--kernels", "4", "--lstm-units", "8",
        "--batch", "32", "--epochs", "2", "--rounds", "1",
    ];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend_from_slice(&common);
        cli(dir, &args)
    };
    run(&["synth", "--out", "raw", "--subjects", "3", "--duration", "120"])?;
    run(&["prep", "--input", "raw/S01.csv", "raw/S02.csv", "raw/S03.csv", "--out", "ds"])?;
    run(&["train", "--data", "ds/S01.ds", "ds/S02.ds", "--out", "train"])?;
    run(&["adapt", "--model", "train/round0.ckpt", "--data", "ds/S03.ds", "--out", "adapt", "--adapt-epochs", "2"])?;
    run(&["eval", "--model", "adapt/adapted.ckpt", "--data", "ds/S03.ds", "--out", "eval"])?;
    run(&["assess", "--predictions", "eval/predictions.csv", "--truth", "eval/truth.csv", "--out", "assess"])
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(fmt_err)?;
    let b = tempfile::tempdir().map_err(fmt_err)?;
    full_run(a.path())?;
    full_run(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure(fa.keys().eq(fb.keys()), || "runs produced different file sets".into())?;
    for (path, bytes) in &fa {
        ensure(&fb[path] == bytes, || format!("{} differs between runs", path.display()))?;
    }
    let ckpts = fa.keys().filter(|p| p.extension().is_some_and(|e| e == "ckpt")).count();
    let reports = fa.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    ensure(ckpts >= 2 && reports >= 10, || format!("only {ckpts} checkpoints and {reports} reports"))?;
    Ok(format!("{} files identical ({ckpts} checkpoints, {reports} csv reports)", fa.len()))
}

// 11 --------------------------------------------------------------------

fn permutation_importance_check() -> Outcome {
    let hz = 20;
    let exec = Execution::default();
    let labels = [BT, KN, SQ, ST, WO];
    let mut b = ProfileBuilder::new(&labels, 30);
    b.informative_groups = Some(vec![2]);
    b.dwell_s = 10.0;
    let base = b.build("base", 5).map_err(fmt_err)?;
    let ds = subject(&base, 0.0, 1, 1800.0, hz, 0.0);
    let sp = &stratified_shuffle_split(&ds, &SplitSpec { rounds: 1, seed: 1, ..Default::default() }).map_err(fmt_err)?[0];
    let cfg = TrainConfig { lr: 1e-3, batch: 32, epochs: 15, seed: 1, ..Default::default() };
    let (m, _) = train(&small_arch(hz), &ds.subset(&sp.training), &ds.subset(&sp.validation), &cfg, exec).map_err(fmt_err)?;
    let groups = ChannelGroup::standard(30);
    ensure(groups[2].name == "chest_acc", || format!("group 2 is {}", groups[2].name))?;
    let r = permutation_importance(&m, &ds.subset(&sp.test), &groups, 5, 1, exec).map_err(fmt_err)?;
    let chance = 1.0 / labels.len() as f64;
    let chest = r.baseline_f1 + r.groups[2].delta_mean;
    ensure((chest - chance).abs() <= 0.1, || format!("permuted chest_acc F1 {chest:.3} vs chance {chance:.3}"))?;
    let other = r.groups.iter().filter(|g| g.group != "chest_acc").max_by(|a, b| a.delta_mean.abs().total_cmp(&b.delta_mean.abs())).unwrap();
    ensure(other.delta_mean.abs() < 0.05, || format!("{} moved F1 by {:.3}", other.group, other.delta_mean))?;
    Ok(format!(
        "baseline {:.3}, chest_acc permuted {chest:.3} (chance {chance:.2}), largest other |dF1| {:.4} ({})",
        r.baseline_f1,
        other.delta_mean.abs(),
        other.group
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("end-to-end synthetic training", end_to_end_training),
        ("incremental adaptation gain", adaptation_gain),
        ("learning rate vs forgetting", lr_forgetting_trend),
        ("performance change arithmetic", published_change_arithmetic),
        ("ergonomics oracle equivalence", ergonomics_oracle),
        ("OWAS levels", owas_levels),
        ("duration formula", duration_formula),
        ("pipeline counts and splits", pipeline_counts),
        ("determinism", determinism),
        ("permutation importance", permutation_importance_check),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
