//! Command-line pipelines: data generation, training, evaluation, temperature
//! scaling, sweeps and OOD scoring. Every command writes a [`RunManifest`]
//! next to its outputs; `rankcal replay <manifest>` reruns it.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use rankcal_core::losses::LossMode;
use rankcal_core::train::default_decay_epochs;
use rankcal_core::{Error, Result};

use config::{pick, pick_list, resolve_seed, ConfigFile};
use manifest::{manifest_path_for_dir, manifest_path_for_file, RunManifest, VERSION};
use pipeline::{
    CalibrateConfig, DataConfig, EvalConfig, GenDataConfig, OodEvalConfig, TrainCommandConfig,
    TrainSettings,
};
use sweep::{Axis, SweepConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rankcal",
    version,
    about = "Calibration-aware training and evaluation on synthetic data"
)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log more; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Gaussian-mixture dataset as train/val/test CSVs.
    GenData(GenDataArgs),
    /// Train an MLP and dump validation (and optionally test/OOD) logits.
    Train(TrainArgs),
    /// Accuracy, ECE, AECE, OE, UE and reliability tables for a logits file.
    Eval(EvalArgs),
    /// Fit a temperature on validation logits.
    Calibrate(CalibrateArgs),
    /// Train and evaluate over one hyperparameter axis and several seeds.
    Sweep(SweepArgs),
    /// Entropy-based AUROC between in- and out-of-distribution logits.
    OodEval(OodEvalArgs),
    /// Rerun a command from its manifest.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Within-class standard deviation.
    #[arg(long)]
    pub spread: Option<f64>,
    /// Norm of every class mean.
    #[arg(long)]
    pub radius: Option<f64>,
}

const DATA_KEYS: &[&str] = &["classes", "dim", "n-per-class", "spread", "radius"];

impl DataArgs {
    fn resolve(&self, file: &ConfigFile) -> Result<DataConfig> {
        let d = DataConfig::default();
        Ok(DataConfig {
            classes: pick(self.classes, file, "classes")?.unwrap_or(d.classes),
            dim: pick(self.dim, file, "dim")?.unwrap_or(d.dim),
            n_per_class: pick(self.n_per_class, file, "n-per-class")?.unwrap_or(d.n_per_class),
            spread: pick(self.spread, file, "spread")?.unwrap_or(d.spread),
            radius: pick(self.radius, file, "radius")?.unwrap_or(d.radius),
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// ce, mrl or m-ndcg.
    #[arg(long)]
    pub loss: Option<LossMode>,
    /// Weight of the calibration term.
    #[arg(long)]
    pub w: Option<f64>,
    /// MRL margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Group size: one raw sample plus q − 1 mixed samples.
    #[arg(long)]
    pub q: Option<usize>,
    /// Beta(α, α) shape of the mixing coefficients.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Epochs at which the learning rate decays; defaults to 50% and 75%.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Initialisation seed; defaults to the run seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

const TRAIN_KEYS: &[&str] = &[
    "loss",
    "w",
    "margin",
    "q",
    "alpha",
    "epochs",
    "batch-size",
    "lr",
    "momentum",
    "hidden",
    "decay-epochs",
    "decay-factor",
    "init-seed",
    "seed",
];

impl TrainFlags {
    fn resolve(&self, file: &ConfigFile, seed: u64) -> Result<TrainSettings> {
        let d = TrainSettings::default();
        let epochs = pick(self.epochs, file, "epochs")?.unwrap_or(d.epochs);
        Ok(TrainSettings {
            loss: pick(self.loss, file, "loss")?.unwrap_or(d.loss),
            w: pick(self.w, file, "w")?.unwrap_or(d.w),
            margin: pick(self.margin, file, "margin")?.unwrap_or(d.margin),
            q: pick(self.q, file, "q")?.unwrap_or(d.q),
            alpha: pick(self.alpha, file, "alpha")?.unwrap_or(d.alpha),
            epochs,
            batch_size: pick(self.batch_size, file, "batch-size")?.unwrap_or(d.batch_size),
            lr: pick(self.lr, file, "lr")?.unwrap_or(d.lr),
            momentum: pick(self.momentum, file, "momentum")?.unwrap_or(d.momentum),
            hidden: pick_list(self.hidden.clone(), file, "hidden")?.unwrap_or(d.hidden),
            decay_epochs: pick_list(self.decay_epochs.clone(), file, "decay-epochs")?
                .unwrap_or_else(|| default_decay_epochs(epochs)),
            decay_factor: pick(self.decay_factor, file, "decay-factor")?.unwrap_or(d.decay_factor),
            seed,
            init_seed: pick(self.init_seed, file, "init-seed")?.unwrap_or(seed),
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write ood.csv with every class mean shifted by this many radii.
    #[arg(long)]
    pub ood_shift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Temperature CSV from `calibrate`; adds post-scaling metrics.
    #[arg(long)]
    pub temperature_file: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Validation logits.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: Option<Axis>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Adds an entropy AUROC column against data shifted by this many radii.
    #[arg(long)]
    pub ood_shift: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Points trained concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OodEvalArgs {
    /// In-distribution logits.
    #[arg(long)]
    pub id: Option<PathBuf>,
    /// Out-of-distribution logits.
    #[arg(long)]
    pub ood: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A command with every setting resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    GenData(GenDataConfig),
    Train(TrainCommandConfig),
    Eval(EvalConfig),
    Calibrate(CalibrateConfig),
    Sweep(SweepConfig),
    OodEval(OodEvalConfig),
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::contract(format!("missing --{key} (flag or config key `{key}`)")))
}

pub const DEFAULT_BINS: usize = 15;

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::GenData(_) => "gen-data",
            Job::Train(_) => "train",
            Job::Eval(_) => "eval",
            Job::Calibrate(_) => "calibrate",
            Job::Sweep(_) => "sweep",
            Job::OodEval(_) => "ood-eval",
        }
    }

    /// Applies flags over the config file over defaults.
    pub fn resolve(command: &Command, file: &ConfigFile) -> Result<Option<Self>> {
        let job = match command {
            Command::GenData(a) => {
                let mut known = DATA_KEYS.to_vec();
                known.extend(["ood-shift", "seed", "out-dir"]);
                file.warn_unused("gen-data", &known);
                Job::GenData(GenDataConfig {
                    data: a.data.resolve(file)?,
                    seed: resolve_seed(a.seed, file)?,
                    ood_shift: pick(a.ood_shift, file, "ood-shift")?,
                    out_dir: pick(a.out_dir.clone(), file, "out-dir")?
                        .unwrap_or_else(|| "data".into()),
                })
            }
            Command::Train(a) => {
                let mut known = TRAIN_KEYS.to_vec();
                known.extend(["train", "val", "test", "ood", "out-dir"]);
                file.warn_unused("train", &known);
                let seed = resolve_seed(a.seed, file)?;
                Job::Train(TrainCommandConfig {
                    settings: a.flags.resolve(file, seed)?,
                    train: required(pick(a.train.clone(), file, "train")?, "train")?,
                    val: required(pick(a.val.clone(), file, "val")?, "val")?,
                    test: pick(a.test.clone(), file, "test")?,
                    ood: pick(a.ood.clone(), file, "ood")?,
                    out_dir: pick(a.out_dir.clone(), file, "out-dir")?
                        .unwrap_or_else(|| "run".into()),
                })
            }
            Command::Eval(a) => {
                file.warn_unused("eval", &["logits", "bins", "temperature-file", "out-dir"]);
                Job::Eval(EvalConfig {
                    logits: required(pick(a.logits.clone(), file, "logits")?, "logits")?,
                    bins: pick(a.bins, file, "bins")?.unwrap_or(DEFAULT_BINS),
                    temperature_file: pick(a.temperature_file.clone(), file, "temperature-file")?,
                    out_dir: pick(a.out_dir.clone(), file, "out-dir")?
                        .unwrap_or_else(|| "eval".into()),
                })
            }
            Command::Calibrate(a) => {
                file.warn_unused("calibrate", &["logits", "out"]);
                Job::Calibrate(CalibrateConfig {
                    logits: required(pick(a.logits.clone(), file, "logits")?, "logits")?,
                    out: pick(a.out.clone(), file, "out")?
                        .unwrap_or_else(|| "temperature.csv".into()),
                })
            }
            Command::Sweep(a) => {
                let mut known = DATA_KEYS.to_vec();
                known.extend(TRAIN_KEYS);
                known.extend([
                    "axis",
                    "values",
                    "seeds",
                    "ood-shift",
                    "bins",
                    "jobs",
                    "out",
                ]);
                file.warn_unused("sweep", &known);
                let seed = resolve_seed(a.seed, file)?;
                Job::Sweep(SweepConfig {
                    axis: required(pick(a.axis, file, "axis")?, "axis")?,
                    values: required(pick_list(a.values.clone(), file, "values")?, "values")?,
                    seeds: pick(a.seeds, file, "seeds")?.unwrap_or(1),
                    seed,
                    data: a.data.resolve(file)?,
                    settings: a.flags.resolve(file, seed)?,
                    ood_shift: pick(a.ood_shift, file, "ood-shift")?,
                    bins: pick(a.bins, file, "bins")?.unwrap_or(DEFAULT_BINS),
                    jobs: pick(a.jobs, file, "jobs")?.unwrap_or(1),
                    out: pick(a.out.clone(), file, "out")?.unwrap_or_else(|| "sweep.csv".into()),
                })
            }
            Command::OodEval(a) => {
                file.warn_unused("ood-eval", &["id", "ood", "out"]);
                Job::OodEval(OodEvalConfig {
                    id: required(pick(a.id.clone(), file, "id")?, "id")?,
                    ood: required(pick(a.ood.clone(), file, "ood")?, "ood")?,
                    out: pick(a.out.clone(), file, "out")?
                        .unwrap_or_else(|| "ood_auroc.csv".into()),
                })
            }
            Command::Replay { .. } => return Ok(None),
        };
        Ok(Some(job))
    }

    fn config_value(&self) -> Result<serde_json::Value> {
        fn to<T: Serialize>(v: &T) -> Result<serde_json::Value> {
            serde_json::to_value(v).map_err(|e| Error::contract(e.to_string()))
        }
        match self {
            Job::GenData(c) => to(c),
            Job::Train(c) => to(c),
            Job::Eval(c) => to(c),
            Job::Calibrate(c) => to(c),
            Job::Sweep(c) => to(c),
            Job::OodEval(c) => to(c),
        }
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        fn from<T: DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            serde_json::from_value(v.clone())
                .map_err(|e| Error::contract(format!("manifest config: {e}")))
        }
        let c = &m.config;
        Ok(match m.command.as_str() {
            "gen-data" => Job::GenData(from(c)?),
            "train" => Job::Train(from(c)?),
            "eval" => Job::Eval(from(c)?),
            "calibrate" => Job::Calibrate(from(c)?),
            "sweep" => Job::Sweep(from(c)?),
            "ood-eval" => Job::OodEval(from(c)?),
            other => {
                return Err(Error::contract(format!(
                    "manifest names unknown command {other:?}"
                )))
            }
        })
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Job::GenData(c) => Some(c.seed),
            Job::Train(c) => Some(c.settings.seed),
            Job::Sweep(c) => Some(c.seed),
            _ => None,
        }
    }

    /// Runs the command and writes its manifest; returns the manifest path.
    pub fn execute(&self) -> Result<PathBuf> {
        let start = Instant::now();
        let (inputs, outputs, manifest_path) = match self {
            Job::GenData(c) => {
                let outputs = pipeline::gen_data(c)?;
                (
                    vec![],
                    outputs,
                    manifest_path_for_dir(&c.out_dir, self.name()),
                )
            }
            Job::Train(c) => {
                let (inputs, outputs) = pipeline::train_command(c)?;
                (
                    inputs,
                    outputs,
                    manifest_path_for_dir(&c.out_dir, self.name()),
                )
            }
            Job::Eval(c) => {
                let (inputs, outputs) = pipeline::eval_command(c)?;
                (
                    inputs,
                    outputs,
                    manifest_path_for_dir(&c.out_dir, self.name()),
                )
            }
            Job::Calibrate(c) => {
                let t = pipeline::calibrate_command(c)?;
                log::info!(
                    "T = {} (val NLL {} -> {})",
                    t.t,
                    t.val_nll_before,
                    t.val_nll_after
                );
                (
                    vec![c.logits.clone()],
                    vec![c.out.clone()],
                    manifest_path_for_file(&c.out),
                )
            }
            Job::Sweep(c) => {
                let rows = sweep::sweep_command(c)?;
                let failed = rows.iter().filter(|r| r.result.is_err()).count();
                if failed > 0 {
                    log::warn!("{failed} of {} sweep points failed", rows.len());
                }
                (vec![], vec![c.out.clone()], manifest_path_for_file(&c.out))
            }
            Job::OodEval(c) => {
                let auc = pipeline::ood_eval_command(c)?;
                log::info!("AUROC = {auc}");
                (
                    vec![c.id.clone(), c.ood.clone()],
                    vec![c.out.clone()],
                    manifest_path_for_file(&c.out),
                )
            }
        };
        let manifest = RunManifest {
            command: self.name().to_string(),
            version: VERSION.to_string(),
            seed: self.seed(),
            config: self.config_value()?,
            inputs,
            outputs,
            duration_secs: start.elapsed().as_secs_f64(),
        };
        manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

/// Resolves and runs a parsed command line.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let job = match &cli.command {
        Command::Replay { manifest } => replay_job(manifest)?,
        command => {
            let file = match &cli.config {
                Some(path) => ConfigFile::load(path)?,
                None => ConfigFile::default(),
            };
            Job::resolve(command, &file)?.expect("replay handled above")
        }
    };
    job.execute()
}

fn replay_job(path: &Path) -> Result<Job> {
    let manifest = RunManifest::load(path)?;
    if manifest.version != VERSION {
        log::warn!(
            "manifest written by version {}, replaying with {VERSION}",
            manifest.version
        );
    }
    Job::from_manifest(&manifest)
}
