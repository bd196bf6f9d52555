//! Command implementations behind the `child` binary. Every command writes
//! the configuration it actually ran with next to its outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::dataset::{export_dataset, import_dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, interpolate_latent, Correlation, EditScope, EvalReport, Interpolation};
use crate::model::ModelConfig;
use crate::process::{build_process, fingerprint, preset, GroundTruthSeries, ProcessSpec};
use crate::rng::substream;
use crate::spectral::{minimal_window_sweep, sweep_csv, transition_point, two_layer_min_window, DiscreteHierChain, SweepRow};
use crate::train::{load_checkpoint, train, TrainConfig, Trainer, Variant};

pub const DATASET_FILE: &str = "dataset.safetensors";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.safetensors";
pub const REPORT_FILE: &str = "eval_report.json";
pub const INTERPOLATION_FILE: &str = "interpolation.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SPECTRAL_PRESETS: [&str; 1] = ["two-layer-min-window"];

/// Dataset size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_sequences: usize,
    /// Defaults to `2 (2L + 1)`.
    pub seq_length: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_sequences: 20_000, seq_length: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub correlation: Correlation,
    /// Trailing dataset sequences scored by `evaluate` (0: all).
    pub sequences: usize,
    /// Sequences sampled from the model for the correlational score (0: skip).
    pub generated_sequences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { correlation: Correlation::Pearson, sequences: 1024, generated_sequences: 1024 }
    }
}

/// One file describing a whole run. Section seeds are derived from `seed`
/// when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub process: ProcessSpec,
    #[serde(default)]
    pub data: DataConfig,
    /// Defaults to a model sized for `process`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// Seed of the sampled series; derived from `seed`.
    #[serde(default)]
    pub sample_seed: u64,
    /// Seed for model sampling during evaluation; derived from `seed`.
    #[serde(default)]
    pub eval_seed: u64,
}

impl RunConfig {
    /// Default run for a process preset.
    pub fn from_preset(name: &str, seed: u64) -> Result<Self> {
        let process = preset(name)?;
        let mut cfg = RunConfig {
            process,
            data: DataConfig::default(),
            model: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from(format!("runs/{}", name.to_ascii_uppercase())),
            seed,
            sample_seed: 0,
            eval_seed: 0,
        };
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Derives section seeds from the root seed, fills the model section and
    /// checks that the sections agree.
    pub fn resolve(&mut self) -> Result<()> {
        self.process.seed = substream(self.seed, "process");
        self.sample_seed = substream(self.seed, "sample");
        self.train.seed = substream(self.seed, "train");
        self.eval_seed = substream(self.seed, "eval");
        self.process.validate()?;
        self.train.validate()?;
        let model = self.model.get_or_insert_with(|| ModelConfig::for_process(&self.process));
        model.validate()?;
        if model.dims_per_layer != self.process.dims_per_layer || model.obs_dim != self.process.obs_dim() {
            return Err(Error::Config("model dims disagree with the process section".into()));
        }
        if model.lag != self.process.lag_order {
            return Err(Error::Config("model lag disagrees with the process lag order".into()));
        }
        let t = self.seq_length();
        if t <= self.process.lag_order {
            return Err(Error::Config(format!("seq_length {t} must exceed the lag order")));
        }
        if self.data.num_sequences == 0 {
            return Err(Error::Config("num_sequences must be >= 1".into()));
        }
        Ok(())
    }

    pub fn seq_length(&self) -> usize {
        self.data.seq_length.unwrap_or_else(|| self.process.default_seq_length())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::for_process(&self.process))
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.process, self.sample_seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Samples the configured series and writes `dataset.safetensors` and the
/// resolved config into `config.out`.
pub fn cmd_generate(config: &RunConfig) -> Result<(PathBuf, GroundTruthSeries)> {
    let process = build_process(&config.process)?;
    let series = process.sample_series(config.data.num_sequences, config.seq_length(), config.sample_seed)?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let path = config.out.join(DATASET_FILE);
    export_dataset(&series, &path)?;
    write_json(&config.out.join(CONFIG_FILE), config)?;
    Ok((path, series))
}

/// Trains on `dataset` (default `config.out/dataset.safetensors`), writing
/// checkpoints, `metrics.jsonl` and the resolved config into `config.out`.
/// With `resume`, continues from `checkpoint_last` in the same directory.
pub fn cmd_train(config: &RunConfig, dataset: Option<&Path>, resume: bool) -> Result<crate::train::TrainState> {
    let default_path = config.out.join(DATASET_FILE);
    let path = dataset.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")));
    }
    let series = import_dataset(path)?;
    let expected = config.fingerprint();
    if series.fingerprint != expected {
        return Err(Error::Integrity(format!(
            "dataset fingerprint {} does not match the config ({expected}); regenerate it with the same config",
            series.fingerprint
        )));
    }
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write_json(&config.out.join(CONFIG_FILE), config)?;
    let model = config.model_config();
    if resume {
        let state = load_checkpoint(&config.out.join(LAST_CHECKPOINT), Some(&config.train.adapt_model(&model)))?;
        if state.config != config.train {
            return Err(Error::Config("checkpoint was trained with a different train config".into()));
        }
        let mut trainer = Trainer::resume(&series, state)?;
        trainer.run(Some(&config.out))?;
        return Ok(trainer.state);
    }
    let metrics = config.out.join(METRICS_FILE);
    if metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    train(&series, &model, &config.train, Some(&config.out))
}

/// Restricts `series` to its trailing `count` sequences (0: all).
fn trailing(series: &GroundTruthSeries, count: usize) -> GroundTruthSeries {
    let n = series.num_sequences();
    if count == 0 || count >= n {
        series.clone()
    } else {
        series.select(n - count..n)
    }
}

/// Scores the best parameters of `checkpoint` on `dataset` and writes
/// `eval_report.json` into `out`.
pub fn cmd_evaluate(checkpoint: &Path, dataset: &Path, eval: &EvalConfig, seed: u64, out: &Path) -> Result<EvalReport> {
    let state = load_checkpoint(checkpoint, None)?;
    let model = state.best_model()?;
    let series = trailing(&import_dataset(dataset)?, eval.sequences);
    let report = evaluate_model(&model, &state.normalizer, &series, eval.correlation, eval.generated_sequences, seed)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_json(
        &out.join("evaluate_config.json"),
        &serde_json::json!({
            "checkpoint": checkpoint,
            "dataset": dataset,
            "eval": eval,
            "seed": seed,
        }),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolateArgs {
    /// Layer index, bottom layer = 0.
    pub layer: usize,
    pub component: usize,
    pub grid: Vec<f64>,
    /// Dataset sequence used as the base window.
    pub sequence: usize,
    /// Edit a single step instead of the whole window.
    pub step: Option<usize>,
}

/// Sweeps one latent component of the best parameters of `checkpoint` on a
/// dataset window and writes `interpolation.csv` into `out`.
pub fn cmd_interpolate(checkpoint: &Path, dataset: &Path, args: &InterpolateArgs, out: &Path) -> Result<Interpolation> {
    let state = load_checkpoint(checkpoint, None)?;
    let model = state.best_model()?;
    let series = import_dataset(dataset)?;
    if args.sequence >= series.num_sequences() {
        return Err(Error::Config(format!(
            "sequence {} out of range; the dataset has {}",
            args.sequence,
            series.num_sequences()
        )));
    }
    let window = series.observations.slice(s![args.sequence, .., ..]);
    let scope = args.step.map_or(EditScope::AllSteps, EditScope::Step);
    let result = interpolate_latent(&model, &state.normalizer, window, args.layer, args.component, scope, &args.grid)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    result.write_csv(&out.join(INTERPOLATION_FILE))?;
    write_json(
        &out.join("interpolate_config.json"),
        &serde_json::json!({ "checkpoint": checkpoint, "dataset": dataset, "args": args }),
    )?;
    Ok(result)
}

/// Where the spectral chain comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SpectralSource {
    Preset(String),
    Instance(PathBuf),
}

pub fn spectral_chain(source: &SpectralSource) -> Result<DiscreteHierChain> {
    match source {
        SpectralSource::Preset(name) if name == "two-layer-min-window" => Ok(two_layer_min_window()),
        SpectralSource::Preset(name) => Err(Error::Config(format!(
            "unknown spectral preset {name:?}; available presets: {}",
            SPECTRAL_PRESETS.join(", ")
        ))),
        SpectralSource::Instance(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let chain: DiscreteHierChain =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            chain.validate()?;
            Ok(chain)
        }
    }
}

/// Runs the minimal-window sweep over half-widths `1..=max_window` and
/// writes `sweep.csv` into `out`.
pub fn cmd_spectral(source: &SpectralSource, max_window: usize, seed: u64, out: &Path) -> Result<Vec<SweepRow>> {
    if max_window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let chain = spectral_chain(source)?;
    let rows = minimal_window_sweep(&chain, 1..=max_window, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(SWEEP_FILE), &sweep_csv(&rows))?;
    write_json(&out.join("chain.json"), &chain)?;
    write_json(
        &out.join("spectral_config.json"),
        &serde_json::json!({
            "source": match source {
                SpectralSource::Preset(p) => serde_json::json!({ "preset": p }),
                SpectralSource::Instance(p) => serde_json::json!({ "instance": p }),
            },
            "max_window": max_window,
            "seed": seed,
        }),
    )?;
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "child", version, about = "Hierarchical temporal latent-variable models: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoKl,
    NoContext,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoKl => Variant::NoKl,
            VariantArg::NoContext => Variant::NoContext,
        }
    }
}

/// Options shared by `generate` and `train`.
#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// Run config file (JSON with sections process, data, model, train, eval).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Process preset A..G, used when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Root seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of sequences; overrides the config file.
    #[arg(long)]
    pub num_sequences: Option<usize>,
    /// Training epochs; overrides the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::from_preset(name, 0)?,
            (None, None) => return Err(Error::Config("pass --config PATH or --preset {A..G}".into())),
            (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are mutually exclusive".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(n) = self.num_sequences {
            cfg.data.num_sequences = n;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(v) = self.variant {
            cfg.train.variant = v.into();
        }
        cfg.resolve()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from a process.
    Generate(RunArgs),
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset file; defaults to OUT/dataset.safetensors.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from OUT/checkpoint_last.safetensors.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint against the true latents of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trailing sequences to score (0: all).
        #[arg(long, default_value_t = 1024)]
        sequences: usize,
        /// Sequences generated for the correlational score (0: skip).
        #[arg(long, default_value_t = 1024)]
        generated: usize,
        #[arg(long)]
        spearman: bool,
    },
    /// Sweep one latent component and export the decoded series as CSV.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Layer index, bottom layer = 0.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        component: usize,
        /// Comma-separated latent values.
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true, required = true)]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Edit only this step instead of the whole window.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Minimal-window sweep of the discrete spectral recovery.
    Spectral {
        /// Built-in chain: two-layer-min-window.
        #[arg(long, conflicts_with = "instance")]
        preset: Option<String>,
        /// Chain JSON file.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Largest half-width W in the sweep.
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn print_report(report: &EvalReport) {
    println!("{:<22} {:>8}", "metric", "value");
    println!("{:<22} {:>8.4}", "mcc_overall", report.mcc_overall);
    for (l, m) in report.mcc_per_layer.iter().enumerate() {
        println!("{:<22} {:>8.4}", format!("mcc_layer_{l}"), m);
    }
    if let Some(s) = report.correlational_score {
        println!("{:<22} {:>8.4}", "correlational_score", s);
    }
    println!("{:<22} {:>8}", "cross_layer_leakage", report.cross_layer_leakage);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

/// Runs one parsed command, printing a short summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let (path, series) = cmd_generate(&cfg)?;
            println!("wrote {} ({} sequences x {} steps x {} features)", path.display(), series.num_sequences(), series.seq_length(), series.obs_dim());
            println!("fingerprint {}", series.fingerprint);
        }
        Command::Train { run, dataset, resume } => {
            let cfg = run.resolve()?;
            let state = cmd_train(&cfg, dataset.as_deref(), resume)?;
            println!("{:>6} {:>10} {:>10} {:>8}", "epoch", "recon", "kl", "val_mcc");
            for m in &state.metrics {
                let mcc = m.val_mcc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("{:>6} {:>10.4} {:>10.4} {:>8}", m.epoch, m.recon, m.kl, mcc);
            }
            if let Some(b) = &state.best {
                println!("best epoch {} val_mcc {:.4}", b.epoch, b.val_mcc);
            }
        }
        Command::Evaluate { checkpoint, dataset, out, seed, sequences, generated, spearman } => {
            let eval = EvalConfig {
                correlation: if spearman { Correlation::Spearman } else { Correlation::Pearson },
                sequences,
                generated_sequences: generated,
            };
            let report = cmd_evaluate(&checkpoint, &dataset, &eval, seed, &out)?;
            print_report(&report);
        }
        Command::Interpolate { checkpoint, dataset, out, layer, component, grid, sequence, step } => {
            let args = InterpolateArgs { layer, component, grid, sequence, step };
            let r = cmd_interpolate(&checkpoint, &dataset, &args, &out)?;
            println!("{:<8} {:>12}", "feature", "rms_change");
            for (f, c) in r.feature_change.iter().enumerate() {
                println!("{f:<8} {c:>12.5}");
            }
            println!("moved features: {} of {}", r.moved_features, r.feature_change.len());
        }
        Command::Spectral { preset, instance, window, seed, out } => {
            let source = match (preset, instance) {
                (_, Some(path)) => SpectralSource::Instance(path),
                (Some(p), None) => SpectralSource::Preset(p),
                (None, None) => SpectralSource::Preset(SPECTRAL_PRESETS[0].into()),
            };
            let rows = cmd_spectral(&source, window, seed, &out)?;
            print!("{}", sweep_csv(&rows));
            match transition_point(&rows) {
                Some(w) => println!("rank condition first holds at W = {w}"),
                None => println!("rank condition fails for every W <= {window}"),
            }
        }
    }
    Ok(())
}

/// Caps rayon parallelism at `CHILD_NUM_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CHILD_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CHILD_NUM_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("CHILD_NUM_THREADS must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
