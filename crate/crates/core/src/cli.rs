//! Command-line workflow: synth → prep → train → adapt → eval → permute →
//! assess → report.
//!
//! Settings resolve in order: built-in defaults, `--preset`, `--config` file
//! (`key=value` lines, `#` comments), then individual flags. Every command
//! writes a `manifest.txt` next to its outputs with the config hash and
//! seed; manifests hold basenames only so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::container::short_hash;
use crate::ergo::{self, ErgoThresholds};
use crate::error::Error;
use crate::incremental::{self, IlConfig, IlScheme, SubjectSplit};
use crate::metrics::{permutation_importance, scores_csv, ChannelGroup, Classifier};
use crate::nn::{Architecture, ClnModel, Padding};
use crate::par::Execution;
use crate::pipeline::{
    self, merge_generalized, parse_label_list, read_csv, read_dataset, stratified_shuffle_split, write_csv,
    write_dataset, LabeledDataset, PostureLabel, SplitSpec,
};
use crate::rng::{self, Purpose};
use crate::synth::{derive_subject, generate_stream, ProfileBuilder};
use crate::trainer::{self, load_model, parse_learning_rate, save_model, CheckpointMeta, TrainConfig};

type Result<T> = anyhow::Result<T>;

/// Every setting with its resolved value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub window_seconds: f64,
    pub overlap: f64,
    pub hz: u32,
    pub channels: usize,
    pub conv_layers: usize,
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: Padding,
    pub lstm_units: usize,
    pub lstm_layers: usize,
    pub dropout: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Learning rate of the command's own optimization (adaptation for
    /// `adapt`).
    pub lr: f64,
    /// Learning rate for from-scratch models inside scheme runs.
    pub source_lr: f64,
    pub adapt_epochs: Option<usize>,
    pub stop_when_perfect: bool,
    pub stop_at_val_f1: Option<f64>,
    pub scheme: IlScheme,
    pub split: String,
    pub seed: u64,
    pub rounds: usize,
    pub mht_scale: f64,
    pub repeats: usize,
    pub subjects: usize,
    pub duration: f64,
    pub drift: f64,
    pub noise: f64,
    pub dwell: f64,
    pub labels: Vec<PostureLabel>,
    pub informative_groups: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        use PostureLabel::*;
        RunConfig {
            window_seconds: 1.0,
            overlap: 0.5,
            hz: 40,
            channels: 30,
            conv_layers: 1,
            kernels: 64,
            kernel_h: 5,
            kernel_w: 30,
            padding: Padding::Same,
            lstm_units: 128,
            lstm_layers: 2,
            dropout: 0.5,
            batch: 300,
            epochs: 300,
            lr: trainer::LR2,
            source_lr: trainer::LR2,
            adapt_epochs: None,
            stop_when_perfect: false,
            stop_at_val_f1: None,
            scheme: IlScheme::MtO,
            split: "stratified".into(),
            seed: 0,
            rounds: 5,
            mht_scale: 1.0,
            repeats: 5,
            subjects: 7,
            duration: 1200.0,
            drift: 0.3,
            noise: 0.3,
            dwell: 20.0,
            labels: vec![BT, KN, LB, MO, SQ, ST, WK, WO],
            informative_groups: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| anyhow::anyhow!("invalid value {v:?} for {key}"))
}

impl RunConfig {
    /// Applies one `key=value` setting. Dashes and underscores are
    /// interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "preset" => self.apply_preset(v)?,
            "window_seconds" => self.window_seconds = parse(&key, v)?,
            "overlap" => self.overlap = parse(&key, v)?,
            "hz" => self.hz = parse(&key, v)?,
            "channels" => self.channels = parse(&key, v)?,
            "conv_layers" => self.conv_layers = parse(&key, v)?,
            "kernels" => self.kernels = parse(&key, v)?,
            "kernel" => {
                let (h, w) = v.split_once('x').ok_or_else(|| anyhow::anyhow!("kernel must look like 5x30"))?;
                self.kernel_h = parse(&key, h)?;
                self.kernel_w = parse(&key, w)?;
            }
            "kernel_h" => self.kernel_h = parse(&key, v)?,
            "kernel_w" => self.kernel_w = parse(&key, v)?,
            "padding" => self.padding = Padding::parse(v)?,
            "lstm_units" => self.lstm_units = parse(&key, v)?,
            "lstm_layers" => self.lstm_layers = parse(&key, v)?,
            "dropout" => self.dropout = parse(&key, v)?,
            "batch" => self.batch = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "lr" | "lr_level" => self.lr = parse_learning_rate(v)?,
            "source_lr" => self.source_lr = parse_learning_rate(v)?,
            "adapt_epochs" => self.adapt_epochs = Some(parse(&key, v)?),
            "stop_when_perfect" => self.stop_when_perfect = parse(&key, v)?,
            "stop_at_val_f1" => self.stop_at_val_f1 = if v == "none" { None } else { Some(parse(&key, v)?) },
            "scheme" => self.scheme = v.parse()?,
            "split" => self.split = v.to_string(),
            "seed" => self.seed = parse(&key, v)?,
            "rounds" => self.rounds = parse(&key, v)?,
            "mht_scale" => self.mht_scale = parse(&key, v)?,
            "repeats" => self.repeats = parse(&key, v)?,
            "subjects" => self.subjects = parse(&key, v)?,
            "duration" => self.duration = parse(&key, v)?,
            "drift" => self.drift = parse(&key, v)?,
            "noise" => self.noise = parse(&key, v)?,
            "dwell" => self.dwell = parse(&key, v)?,
            "labels" => self.labels = parse_label_list(v)?,
            "informative_groups" => {
                self.informative_groups = if v.is_empty() || v == "all" {
                    None
                } else {
                    Some(v.split(',').map(|g| parse("informative_groups", g)).collect::<Result<_>>()?)
                }
            }
            other => bail!("unknown setting {other:?}"),
        }
        Ok(())
    }

    /// `desk`: 16 kernels, 32 LSTM units, 30 epochs.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.kernels = 16;
                self.lstm_units = 32;
                self.epochs = 30;
            }
            "full" => {
                let d = RunConfig::default();
                self.kernels = d.kernels;
                self.lstm_units = d.lstm_units;
                self.epochs = d.epochs;
            }
            other => bail!("unknown preset {other:?} (expected desk or full)"),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected key=value, got {line:?}") })?;
            self.set(k, v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hz == 0 {
            bail!("hz must be positive");
        }
        pipeline::window_len(self.window_seconds, self.hz)?;
        if !pipeline::OVERLAPS.contains(&self.overlap) {
            bail!("overlap must be 0 or 0.5, got {}", self.overlap);
        }
        if self.channels == 0 {
            bail!("channels must be positive");
        }
        self.train_config(self.lr, self.epochs.max(1)).validate()?;
        if self.adapt_epochs == Some(0) && self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        if self.rounds == 0 || self.repeats == 0 {
            bail!("rounds and repeats must be at least 1");
        }
        ErgoThresholds::with_scale(self.mht_scale).validate()?;
        if !(self.duration > 0.0) || self.subjects == 0 {
            bail!("synthesis needs a positive duration and at least one subject");
        }
        if self.labels.len() < 2 {
            bail!("at least two labels are required");
        }
        self.split_mode(0)?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.window_seconds * self.hz as f64).round() as usize
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            steps: self.steps(),
            channels: self.channels,
            conv_layers: self.conv_layers,
            kernels: self.kernels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            padding: self.padding,
            lstm_layers: self.lstm_layers,
            hidden: self.lstm_units,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self, lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr,
            batch: self.batch,
            epochs,
            seed: self.seed,
            stop_when_perfect: self.stop_when_perfect,
            stop_at_val_f1: self.stop_at_val_f1,
            ..Default::default()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { rounds: self.rounds, seed: self.seed, ..Default::default() }
    }

    fn split_mode(&self, round: usize) -> Result<SubjectSplit> {
        match self.split.as_str() {
            "stratified" => Ok(SubjectSplit::Stratified(SplitSpec { rounds: round + 1, ..self.split_spec() })),
            "quasi" => Ok(SubjectSplit::Quasi { seed: self.seed }),
            other => bail!("unknown split {other:?} (expected stratified or quasi)"),
        }
    }

    /// Sorted `key=value` lines of every setting.
    pub fn canonical(&self) -> String {
        let mut m = BTreeMap::new();
        let labels = self.labels.iter().map(|l| l.code()).collect::<Vec<_>>().join(",");
        let groups = self
            .informative_groups
            .as_ref()
            .map_or("all".to_string(), |g| g.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        for (k, v) in [
            ("window_seconds", self.window_seconds.to_string()),
            ("overlap", self.overlap.to_string()),
            ("hz", self.hz.to_string()),
            ("channels", self.channels.to_string()),
            ("conv_layers", self.conv_layers.to_string()),
            ("kernels", self.kernels.to_string()),
            ("kernel", format!("{}x{}", self.kernel_h, self.kernel_w)),
            ("padding", self.padding.name().to_string()),
            ("lstm_units", self.lstm_units.to_string()),
            ("lstm_layers", self.lstm_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("source_lr", self.source_lr.to_string()),
            ("adapt_epochs", self.adapt_epochs.map_or("epochs".into(), |e| e.to_string())),
            ("stop_when_perfect", self.stop_when_perfect.to_string()),
            ("stop_at_val_f1", self.stop_at_val_f1.map_or("none".into(), |t| t.to_string())),
            ("scheme", self.scheme.to_string()),
            ("split", self.split.clone()),
            ("seed", self.seed.to_string()),
            ("rounds", self.rounds.to_string()),
            ("mht_scale", self.mht_scale.to_string()),
            ("repeats", self.repeats.to_string()),
            ("subjects", self.subjects.to_string()),
            ("duration", self.duration.to_string()),
            ("drift", self.drift.to_string()),
            ("noise", self.noise.to_string()),
            ("dwell", self.dwell.to_string()),
            ("labels", labels),
            ("informative_groups", groups),
        ] {
            m.insert(k, v);
        }
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Settings {
    /// key=value settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named bundle of settings (`desk` or `full`).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub window_seconds: Option<String>,
    #[arg(long, global = true)]
    pub overlap: Option<String>,
    #[arg(long, global = true)]
    pub hz: Option<String>,
    #[arg(long, global = true)]
    pub channels: Option<String>,
    #[arg(long, global = true)]
    pub conv_layers: Option<String>,
    #[arg(long, global = true)]
    pub kernels: Option<String>,
    /// Kernel size as `HxW`.
    #[arg(long, global = true)]
    pub kernel: Option<String>,
    #[arg(long, global = true)]
    pub padding: Option<String>,
    #[arg(long, global = true)]
    pub lstm_units: Option<String>,
    #[arg(long, global = true)]
    pub lstm_layers: Option<String>,
    #[arg(long, global = true)]
    pub dropout: Option<String>,
    #[arg(long, global = true)]
    pub batch: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<String>,
    /// Learning rate, numeric.
    #[arg(long, global = true)]
    pub lr: Option<String>,
    /// LR1, LR2 or LR3.
    #[arg(long, global = true)]
    pub lr_level: Option<String>,
    #[arg(long, global = true)]
    pub source_lr: Option<String>,
    #[arg(long, global = true)]
    pub adapt_epochs: Option<String>,
    #[arg(long, global = true)]
    pub stop_when_perfect: Option<String>,
    /// Stop once validation Macro F1 reaches this value.
    #[arg(long, global = true)]
    pub stop_at_val_f1: Option<String>,
    /// oto or mto.
    #[arg(long, global = true)]
    pub scheme: Option<String>,
    /// stratified or quasi.
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub rounds: Option<String>,
    #[arg(long, global = true)]
    pub mht_scale: Option<String>,
    #[arg(long, global = true)]
    pub repeats: Option<String>,
    #[arg(long, global = true)]
    pub subjects: Option<String>,
    /// Seconds per synthetic subject.
    #[arg(long, global = true)]
    pub duration: Option<String>,
    #[arg(long, global = true)]
    pub drift: Option<String>,
    #[arg(long, global = true)]
    pub noise: Option<String>,
    #[arg(long, global = true)]
    pub dwell: Option<String>,
    /// Comma-separated label codes.
    #[arg(long, global = true)]
    pub labels: Option<String>,
    /// Comma-separated sensor-group indices that carry class identity.
    #[arg(long, global = true)]
    pub informative_groups: Option<String>,
}

impl Settings {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let all: [(&'static str, &Option<String>); 34] = [
            ("window_seconds", &self.window_seconds),
            ("overlap", &self.overlap),
            ("hz", &self.hz),
            ("channels", &self.channels),
            ("conv_layers", &self.conv_layers),
            ("kernels", &self.kernels),
            ("kernel", &self.kernel),
            ("padding", &self.padding),
            ("lstm_units", &self.lstm_units),
            ("lstm_layers", &self.lstm_layers),
            ("dropout", &self.dropout),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("lr_level", &self.lr_level),
            ("source_lr", &self.source_lr),
            ("adapt_epochs", &self.adapt_epochs),
            ("stop_when_perfect", &self.stop_when_perfect),
            ("stop_at_val_f1", &self.stop_at_val_f1),
            ("scheme", &self.scheme),
            ("split", &self.split),
            ("seed", &self.seed),
            ("rounds", &self.rounds),
            ("mht_scale", &self.mht_scale),
            ("repeats", &self.repeats),
            ("subjects", &self.subjects),
            ("duration", &self.duration),
            ("drift", &self.drift),
            ("noise", &self.noise),
            ("dwell", &self.dwell),
            ("labels", &self.labels),
            ("informative_groups", &self.informative_groups),
            ("preset", &None),
            ("config", &None),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    /// Defaults, then preset, then config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, v).with_context(|| format!("--{}", k.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "cln-posture", version, about = "Posture recognition and ergonomic risk assessment from wearable motion streams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub settings: Settings,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Personalized,
    Generalized,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labeled sensor streams, one per subject.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, label and normalize streams into dataset archives.
    Prep {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Downsample from this rate to `--hz` first.
        #[arg(long)]
        source_hz: Option<u32>,
        /// Skip writing stratified split indices.
        #[arg(long)]
        no_splits: bool,
    },
    /// Train from scratch over stratified shuffle-split rounds.
    Train {
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
    },
    /// Adapt a checkpoint to a target subject, or run a full OtO/MtO
    /// protocol when no checkpoint is given.
    Adapt {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Channel-group permutation importance.
    Permute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ergonomic assessment of a window-level posture sequence.
    Assess {
        /// `window_start,label` CSV.
        #[arg(long)]
        predictions: PathBuf,
        /// Ground-truth sequence in the same format, for comparison.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate train/adapt outputs across rounds and seeds.
    Report {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.settings.resolve()?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match &cli.command {
        Command::Synth { out } => cmd_synth(&cfg, out),
        Command::Prep { inputs, out, source_hz, no_splits } => cmd_prep(&cfg, inputs, out, *source_hz, !no_splits, exec),
        Command::Train { data, out, mode } => cmd_train(&cfg, data, out, *mode, exec),
        Command::Adapt { model, data, out } => cmd_adapt(&cfg, model.as_deref(), data, out, exec),
        Command::Eval { model, data, out } => cmd_eval(&cfg, model, data, out, exec),
        Command::Permute { model, data, out } => cmd_permute(&cfg, model, data, out, exec),
        Command::Assess { predictions, truth, out } => cmd_assess(&cfg, predictions, truth.as_deref(), out),
        Command::Report { inputs, out } => cmd_report(inputs, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn basename(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn manifest(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], extra: &[(String, String)]) -> Result<()> {
    let mut e = vec![
        ("command".to_string(), command.to_string()),
        ("config_hash".to_string(), cfg.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("rng".to_string(), rng::ALGORITHM.to_string()),
    ];
    if !inputs.is_empty() {
        e.push(("inputs".into(), inputs.iter().map(|p| basename(p)).collect::<Vec<_>>().join(",")));
    }
    e.extend(extra.iter().cloned());
    let mut text = manifest(&e);
    text.push_str("[settings]\n");
    text.push_str(&cfg.canonical());
    write_text(&dir.join("manifest.txt"), &text)
}

fn read_ds(path: &Path) -> Result<LabeledDataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (ds, _) = read_dataset(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))?;
    Ok(ds)
}

fn read_model(path: &Path) -> Result<(ClnModel, CheckpointMeta)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(load_model(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))?)
}

fn write_model(path: &Path, model: &ClnModel, meta: &CheckpointMeta) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    save_model(model, meta, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut builder = ProfileBuilder::new(&cfg.labels, cfg.channels);
    builder.noise_std = cfg.noise;
    builder.dwell_s = cfg.dwell;
    builder.informative_groups = cfg.informative_groups.clone();
    let base = builder.build("base", cfg.seed)?;
    let mut files = Vec::new();
    for k in 1..=cfg.subjects {
        let id = format!("S{k:02}");
        let mut profile = derive_subject(&base, cfg.drift, rng::derive(cfg.seed, Purpose::Profile, &[k as u64]))?;
        profile.id = id.clone();
        let stream_seed = rng::derive(cfg.seed, Purpose::SignalNoise, &[k as u64]);
        let records = generate_stream(&profile, cfg.duration, cfg.hz, cfg.channels, stream_seed)?;
        let path = out.join(format!("{id}.csv"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_csv(&mut w, &records).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        let mut entries = vec![
            ("subject".to_string(), id.clone()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("stream_seed".to_string(), stream_seed.to_string()),
            ("rng".to_string(), rng::ALGORITHM.to_string()),
            ("hz".to_string(), cfg.hz.to_string()),
            ("channels".to_string(), cfg.channels.to_string()),
            ("duration_s".to_string(), cfg.duration.to_string()),
            ("records".to_string(), records.len().to_string()),
            ("config_hash".to_string(), cfg.hash()),
        ];
        entries.extend(profile.manifest_entries());
        write_text(&out.join(format!("{id}.manifest")), &manifest(&entries))?;
        files.push(format!("{id}.csv"));
    }
    write_manifest(out, "synth", cfg, &[], &[("files".into(), files.join(","))])
}

fn cmd_prep(cfg: &RunConfig, inputs: &[PathBuf], out: &Path, source_hz: Option<u32>, splits: bool, exec: Execution) -> Result<()> {
    create_dir(out)?;
    for input in inputs {
        let f = fs::File::open(input).map_err(|e| Error::io(input, e))?;
        let mut records = read_csv(BufReader::new(f)).with_context(|| format!("reading stream {}", input.display()))?;
        if let Some(src) = source_hz.filter(|&s| s != cfg.hz) {
            records = pipeline::downsample(&records, src, cfg.hz, cfg.seed)?;
        }
        if records.first().is_some_and(|r| r.values.len() != cfg.channels) {
            bail!("{} has {} channels, config expects {}", input.display(), records[0].values.len(), cfg.channels);
        }
        let name = stem(input);
        let ds = pipeline::build_dataset(&name, &records, cfg.window_seconds, cfg.hz, cfg.overlap, exec)?;
        let meta = vec![
            ("hz".to_string(), cfg.hz.to_string()),
            ("window_seconds".to_string(), cfg.window_seconds.to_string()),
            ("overlap".to_string(), cfg.overlap.to_string()),
            ("source".to_string(), basename(input)),
            ("seed".to_string(), cfg.seed.to_string()),
            ("config_hash".to_string(), cfg.hash()),
        ];
        let path = out.join(format!("{name}.ds"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_dataset(&ds, &meta, &mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        let mut m = meta.clone();
        m.insert(0, ("subject".into(), name.clone()));
        m.push(("windows".into(), ds.len().to_string()));
        for (l, n) in ds.histogram() {
            m.push((format!("count.{l}"), n.to_string()));
        }
        write_text(&out.join(format!("{name}.manifest")), &manifest(&m))?;
        if splits {
            let rounds = stratified_shuffle_split(&ds, &cfg.split_spec())
                .with_context(|| format!("splitting {name} (use --no-splits to skip)"))?;
            let mut s = String::from("round,part,index\n");
            for (r, sp) in rounds.iter().enumerate() {
                for (part, idx) in [("training", &sp.training), ("validation", &sp.validation), ("test", &sp.test)] {
                    for i in idx {
                        writeln!(s, "{r},{part},{i}").unwrap();
                    }
                }
            }
            write_text(&out.join(format!("{name}.splits.csv")), &s)?;
        }
    }
    let inputs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out, "prep", cfg, &inputs, &[])
}

fn load_merged(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let sets = paths.iter().map(|p| read_ds(p)).collect::<Result<Vec<_>>>()?;
    Ok(merge_generalized(&sets, &Default::default())?)
}

fn check_dims(cfg: &RunConfig, ds: &LabeledDataset) -> Result<()> {
    if (ds.steps, ds.channels) != (cfg.steps(), cfg.channels) {
        bail!(
            "dataset {} has {}x{} windows but the config implies {}x{} (window_seconds*hz x channels)",
            ds.subject,
            ds.steps,
            ds.channels,
            cfg.steps(),
            cfg.channels
        );
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &[PathBuf], out: &Path, mode: Option<TrainMode>, exec: Execution) -> Result<()> {
    let mode = mode.unwrap_or(if data.len() > 1 { TrainMode::Generalized } else { TrainMode::Personalized });
    if mode == TrainMode::Personalized && data.len() != 1 {
        bail!("personalized training takes exactly one dataset, got {}", data.len());
    }
    let ds = load_merged(data)?;
    check_dims(cfg, &ds)?;
    create_dir(out)?;
    let arch = cfg.architecture();
    let splits = stratified_shuffle_split(&ds, &cfg.split_spec())?;
    let mode_name = match mode {
        TrainMode::Personalized => "personalized",
        TrainMode::Generalized => "generalized",
    };
    let mut metrics = String::from("round,descriptor,mode,test_macro_f1,best_epoch,val_macro_f1,config_hash,seed\n");
    for (r, sp) in splits.iter().enumerate() {
        let (tr, va, te) = (ds.subset(&sp.training), ds.subset(&sp.validation), ds.subset(&sp.test));
        let tc = TrainConfig { seed: rng::derive(cfg.seed, Purpose::Init, &[r as u64]), ..cfg.train_config(cfg.lr, cfg.epochs) };
        let hash = trainer::config_hash(&arch, &tc);
        let ckpt = out.join(format!("round{r}.ckpt"));
        let mut classes = tr.classes();
        classes.extend(va.classes());
        classes.extend(te.classes());
        classes.sort();
        classes.dedup();
        let init = ClnModel::new(arch.clone(), classes, tc.seed)?;
        let (model, history) = trainer::train_from(init, &tr, &va, &tc, exec, |m, rec| {
            let meta = CheckpointMeta { seed: tc.seed, epoch: rec.epoch, val_macro_f1: rec.val_macro_f1, config_hash: hash.clone() };
            write_model(&ckpt, m, &meta).map_err(|e| Error::format(format!("{e:#}")))
        })?;
        write_text(&out.join(format!("round{r}.log.csv")), &history.to_csv())?;
        let (cm, f1) = trainer::evaluate(&model, &te, exec)?;
        write_text(&out.join(format!("round{r}.confusion.csv")), &cm.to_csv(false))?;
        write_text(&out.join(format!("round{r}.scores.csv")), &scores_csv(&cm))?;
        let best = history.best().expect("at least one epoch is saved");
        writeln!(
            metrics,
            "{r},{},{mode_name},{f1:.6},{},{:.6},{hash},{}",
            arch.descriptor(),
            best.epoch,
            best.val_macro_f1,
            tc.seed
        )
        .unwrap();
    }
    write_text(&out.join("metrics.csv"), &metrics)?;
    let inputs: Vec<&Path> = data.iter().map(|p| p.as_path()).collect();
    write_manifest(out, "train", cfg, &inputs, &[("mode".into(), mode_name.into()), ("descriptor".into(), arch.descriptor())])
}

fn predictions(model: &ClnModel, ds: &LabeledDataset, exec: Execution) -> Result<Vec<(f64, PostureLabel)>> {
    let labels = exec.map_slice(&ds.images, |img| model.classify(img.data.view()));
    ds.images.iter().zip(labels).map(|(img, l)| Ok((img.start, l?))).collect()
}

fn truth(ds: &LabeledDataset) -> Vec<(f64, PostureLabel)> {
    ds.images.iter().map(|i| (i.start, i.label)).collect()
}

fn cmd_adapt(cfg: &RunConfig, model: Option<&Path>, data: &[PathBuf], out: &Path, exec: Execution) -> Result<()> {
    let adapt_cfg = cfg.train_config(cfg.lr, cfg.adapt_epochs.unwrap_or(cfg.epochs));
    let inputs: Vec<&Path> = data.iter().map(|p| p.as_path()).collect();
    let arch = cfg.architecture();
    match model {
        Some(src_path) => {
            if data.len() != 1 {
                bail!("adapting a checkpoint takes exactly one target dataset");
            }
            let (source, _) = read_model(src_path)?;
            incremental::ensure_architecture(&source, &arch)?;
            let target = read_ds(&data[0])?;
            check_dims(cfg, &target)?;
            create_dir(out)?;
            let parts = incremental::split_subject(&target, &cfg.split_mode(0)?)?;
            let pre = trainer::evaluate(&source.with_classes(&target.classes(), adapt_cfg.seed), &parts.test, exec)?.1;
            let (adapted, history) = incremental::adapt(&source, &parts.train, &parts.val, &adapt_cfg, exec)?;
            let (cm, post) = trainer::evaluate(&adapted, &parts.test, exec)?;
            let best = history.best().map_or((0, 0.0), |b| (b.epoch, b.val_macro_f1));
            let hash = trainer::config_hash(&arch, &adapt_cfg);
            let meta = CheckpointMeta { seed: adapt_cfg.seed, epoch: best.0, val_macro_f1: best.1, config_hash: hash.clone() };
            write_model(&out.join("adapted.ckpt"), &adapted, &meta)?;
            write_text(&out.join("adapt.log.csv"), &history.to_csv())?;
            write_text(&out.join("confusion.csv"), &cm.to_csv(false))?;
            write_text(
                &out.join("adapt_eval.csv"),
                &format!(
                    "target,pre_adaptation_f1,post_adaptation_f1,lr,config_hash,seed\n{},{pre:.6},{post:.6},{},{hash},{}\n",
                    target.subject, adapt_cfg.lr, adapt_cfg.seed
                ),
            )?;
            write_text(&out.join("predictions.csv"), &ergo::predictions_csv(&predictions(&adapted, &parts.test, exec)?))?;
            write_text(&out.join("truth.csv"), &ergo::predictions_csv(&truth(&parts.test)))?;
            let mut all = inputs.clone();
            all.insert(0, src_path);
            write_manifest(out, "adapt", cfg, &all, &[])
        }
        None => {
            let subjects = data.iter().map(|p| read_ds(p)).collect::<Result<Vec<_>>>()?;
            for s in &subjects {
                check_dims(cfg, s)?;
            }
            create_dir(out)?;
            let mut il = IlConfig::new(arch, cfg.train_config(cfg.source_lr, cfg.epochs), adapt_cfg);
            il.split = cfg.split_mode(0)?;
            let report = match cfg.scheme {
                IlScheme::OtO => incremental::run_oto(&subjects, &il, exec)?,
                IlScheme::MtO => incremental::run_mto(&subjects, &il, exec)?,
            };
            write_text(&out.join("il_report.csv"), &report.to_csv())?;
            write_text(&out.join("il_classes.csv"), &report.class_csv())?;
            write_manifest(out, "adapt", cfg, &inputs, &[("scheme".into(), cfg.scheme.to_string())])?;
            if let Some(e) = &report.error {
                bail!("protocol aborted (partial report written): {e}");
            }
            Ok(())
        }
    }
}

fn cmd_eval(cfg: &RunConfig, model: &Path, data: &Path, out: &Path, exec: Execution) -> Result<()> {
    let (m, meta) = read_model(model)?;
    let ds = read_ds(data)?;
    create_dir(out)?;
    let (cm, f1) = trainer::evaluate(&m, &ds, exec)?;
    write_text(&out.join("confusion.csv"), &cm.to_csv(false))?;
    write_text(&out.join("confusion_normalized.csv"), &cm.to_csv(true))?;
    write_text(&out.join("scores.csv"), &scores_csv(&cm))?;
    let contributing = cm.contributing().iter().map(|l| l.code()).collect::<Vec<_>>().join(" ");
    write_text(
        &out.join("metrics.csv"),
        &format!(
            "subject,descriptor,macro_f1,images,contributing,checkpoint_hash\n{},{},{f1:.6},{},{contributing},{}\n",
            ds.subject,
            m.arch.descriptor(),
            ds.len(),
            meta.config_hash
        ),
    )?;
    write_text(&out.join("predictions.csv"), &ergo::predictions_csv(&predictions(&m, &ds, exec)?))?;
    write_text(&out.join("truth.csv"), &ergo::predictions_csv(&truth(&ds)))?;
    write_manifest(out, "eval", cfg, &[model, data], &[])
}

fn cmd_permute(cfg: &RunConfig, model: &Path, data: &Path, out: &Path, exec: Execution) -> Result<()> {
    let (m, _) = read_model(model)?;
    let ds = read_ds(data)?;
    create_dir(out)?;
    let groups = ChannelGroup::standard(ds.channels);
    let r = permutation_importance(&m, &ds, &groups, cfg.repeats, cfg.seed, exec)?;
    write_text(&out.join("importance.csv"), &r.to_csv())?;
    write_text(&out.join("importance_classes.csv"), &r.class_csv())?;
    write_manifest(out, "permute", cfg, &[model, data], &[])
}

fn read_sequence(path: &Path) -> Result<Vec<PostureLabel>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = ergo::read_predictions(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(rows.into_iter().map(|(_, l)| l).collect())
}

fn cmd_assess(cfg: &RunConfig, predictions: &Path, truth: Option<&Path>, out: &Path) -> Result<()> {
    let th = ErgoThresholds::with_scale(cfg.mht_scale);
    let pred = ergo::assess(&ergo::run_length_encode(&read_sequence(predictions)?)?, &th)?;
    create_dir(out)?;
    write_text(&out.join("ergo_report.csv"), &pred.to_csv())?;
    let mut inputs = vec![predictions];
    if let Some(t) = truth {
        let g = ergo::assess(&ergo::run_length_encode(&read_sequence(t)?)?, &th)?;
        write_text(&out.join("ergo_truth.csv"), &g.to_csv())?;
        write_text(&out.join("ergo_comparison.csv"), &ergo::compare_assessments(&g, &pred)?.to_csv())?;
        inputs.push(t);
    }
    write_manifest(out, "assess", cfg, &inputs, &[("mht_scale".into(), cfg.mht_scale.to_string())])
}

/// Header-indexed rows of a small CSV file (comment lines skipped).
fn read_table(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect())
}

fn summarize(groups: BTreeMap<(String, String, String), Vec<f64>>, s: &mut String) {
    for ((kind, group, metric), v) in groups {
        let (mean, std) = crate::metrics::mean_std(&v);
        writeln!(s, "{kind},{group},{metric},{mean:.4},{std:.4},{}", v.len()).unwrap();
    }
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut found = 0;
    for dir in inputs {
        let metrics = dir.join("metrics.csv");
        if metrics.is_file() {
            for row in read_table(&metrics)? {
                if let (Some(d), Some(m), Some(f)) = (row.get("descriptor"), row.get("mode"), row.get("test_macro_f1")) {
                    groups.entry(("train".into(), format!("{d} {m}"), "test_macro_f1".into())).or_default().push(parse("test_macro_f1", f)?);
                    found += 1;
                }
            }
        }
        let il = dir.join("il_report.csv");
        if il.is_file() {
            for row in read_table(&il)? {
                let group = format!("{} lr={}", row.get("scheme").cloned().unwrap_or_default(), row.get("lr").cloned().unwrap_or_default());
                for metric in ["pre_adaptation_f1", "incremental_f1", "incremental_change", "forgetting_f1", "forgetting_change"] {
                    if let Some(v) = row.get(metric).filter(|v| !v.is_empty()) {
                        groups.entry(("adapt".into(), group.clone(), metric.into())).or_default().push(parse(metric, v)?);
                    }
                }
                found += 1;
            }
        }
    }
    if found == 0 {
        bail!("no metrics.csv or il_report.csv found in the given directories");
    }
    let mut s = String::from("kind,group,metric,mean,std,n\n");
    summarize(groups, &mut s);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out, &s)
}
