//! Command bodies operating on fully resolved configurations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rankcal_core::calibrate::{self, Temperature};
use rankcal_core::datasets::{
    self, fmt_f64, write_atomic, LabeledDataset, SplitFractions, SplitTag, SyntheticSpec,
};
use rankcal_core::losses::{LossConfig, LossMode};
use rankcal_core::metrics::{self, BinScheme, PredictionSet, ReliabilityTable};
use rankcal_core::numerics::Tensor;
use rankcal_core::train::{self, Checkpoint, ModelSpec, TrainConfig};
use rankcal_core::{Error, Result};

/// Synthetic Gaussian-mixture parameters shared by `gen-data` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub radius: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            n_per_class: 1200,
            spread: 1.0,
            radius: 1.0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            n_per_class: self.n_per_class,
            spread: self.spread,
            radius: self.radius,
            seed,
        }
    }
}

pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: Option<LabeledDataset>,
}

/// Generates and splits one synthetic dataset. The OOD set is the test
/// split of the shifted generator, so it matches the test set in size and
/// class balance.
pub fn synthetic_splits(data: &DataConfig, seed: u64, ood_shift: Option<f64>) -> Result<Splits> {
    let spec = data.spec(seed);
    let ds = datasets::generate_gaussian_mixture(&spec)?;
    let [train, val, test] = datasets::split_indices(&ds, SplitFractions::default(), seed)?;
    let ood = match ood_shift {
        Some(shift) => {
            Some(datasets::generate_ood_shift(&spec, shift)?.subset(&test, SplitTag::Test))
        }
        None => None,
    };
    Ok(Splits {
        train: ds.subset(&train, SplitTag::Train),
        val: ds.subset(&val, SplitTag::Val),
        test: ds.subset(&test, SplitTag::Test),
        ood,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub seed: u64,
    pub ood_shift: Option<f64>,
    pub out_dir: PathBuf,
}

pub fn gen_data(cfg: &GenDataConfig) -> Result<Vec<PathBuf>> {
    let splits = synthetic_splits(&cfg.data, cfg.seed, cfg.ood_shift)?;
    create_dir(&cfg.out_dir)?;
    let mut outputs = Vec::new();
    for (name, ds) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ]
    .into_iter()
    .chain(splits.ood.as_ref().map(|ds| ("ood", ds)))
    {
        let path = cfg.out_dir.join(format!("{name}.csv"));
        datasets::save_csv(ds, &path)?;
        outputs.push(path);
    }
    Ok(outputs)
}

/// Training hyperparameters as resolved from flags, config file and defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub loss: LossMode,
    pub w: f64,
    pub margin: f64,
    pub q: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub hidden: Vec<usize>,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub init_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            loss: base.loss.mode,
            w: base.loss.w,
            margin: base.loss.m,
            q: base.q,
            alpha: base.alpha,
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr: base.lr,
            momentum: base.momentum,
            hidden: vec![128, 128],
            decay_epochs: base.decay_epochs,
            decay_factor: base.decay_factor,
            seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            loss: LossConfig {
                mode: self.loss,
                w: self.w,
                m: self.margin,
            },
            q: self.q,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden: self.hidden.clone(),
            classes,
            init_seed: self.init_seed,
        }
    }

    pub fn fit(&self, train: &LabeledDataset, val: &LabeledDataset) -> Result<Checkpoint> {
        let spec = self.model_spec(train.dim(), train.classes());
        train::fit(train, val, &spec, &self.train_config())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    #[serde(flatten)]
    pub settings: TrainSettings,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn train_log_csv(ckpt: &Checkpoint) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for (e, ((tl, vl), va)) in ckpt
        .train_losses
        .iter()
        .zip(&ckpt.val_losses)
        .zip(&ckpt.val_accuracies)
        .enumerate()
    {
        let lr = train::lr_at(e, &ckpt.config);
        out.push_str(&format!(
            "{e},{},{},{},{}\n",
            fmt_f64(lr),
            fmt_f64(*tl),
            fmt_f64(*vl),
            fmt_f64(*va)
        ));
    }
    out
}

/// Returns `(inputs, outputs)`.
pub fn train_command(cfg: &TrainCommandConfig) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let train = datasets::load_csv(&cfg.train, SplitTag::Train)?;
    let classes = train.classes();
    let val = datasets::load_csv_with_classes(&cfg.val, classes, SplitTag::Val)?;
    let ckpt = cfg.settings.fit(&train, &val)?;
    create_dir(&cfg.out_dir)?;

    let mut inputs = vec![cfg.train.clone(), cfg.val.clone()];
    let checkpoint_path = cfg.out_dir.join("checkpoint.txt");
    ckpt.save(&checkpoint_path)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    write_atomic(&log_path, train_log_csv(&ckpt).as_bytes())?;
    let val_logits = cfg.out_dir.join("val_logits.csv");
    train::dump_logits(&ckpt, &val, &val_logits)?;
    let mut outputs = vec![checkpoint_path, log_path, val_logits];

    for (path, tag, name) in [
        (&cfg.test, SplitTag::Test, "test_logits.csv"),
        (&cfg.ood, SplitTag::Test, "ood_logits.csv"),
    ] {
        if let Some(path) = path {
            let ds = datasets::load_csv_with_classes(path, classes, tag)?;
            let out = cfg.out_dir.join(name);
            train::dump_logits(&ckpt, &ds, &out)?;
            inputs.push(path.clone());
            outputs.push(out);
        }
    }
    Ok((inputs, outputs))
}

/// Headline metrics of one set of logits at one temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics {
    pub n: usize,
    pub acc: f64,
    pub ece: f64,
    pub aece: f64,
    pub oe: f64,
    pub ue: f64,
    pub nll: f64,
}

pub fn stage_metrics(
    logits: &Tensor,
    labels: &[usize],
    t: f64,
    bins: usize,
) -> Result<(StageMetrics, ReliabilityTable, PredictionSet)> {
    let probs = calibrate::apply_temperature(logits, t)?;
    let ps = metrics::predict(&probs, labels)?;
    let width = metrics::reliability_table(&ps, bins, BinScheme::EqualWidth)?;
    let mass = metrics::reliability_table(&ps, bins, BinScheme::EqualMass)?;
    let m = StageMetrics {
        n: ps.len(),
        acc: ps.accuracy(),
        ece: width.calibration_error(),
        aece: mass.calibration_error(),
        oe: width.overconfidence_error(),
        ue: width.underconfidence_error(),
        nll: calibrate::nll_at(logits, labels, t),
    };
    Ok((m, width, ps))
}

pub fn metrics_csv(rows: &[(&str, f64, StageMetrics)]) -> String {
    let mut out = String::from("stage,temperature,n,acc,ece,aece,oe,ue,nll\n");
    for (stage, t, m) in rows {
        out.push_str(&format!(
            "{stage},{},{},{},{},{},{},{},{}\n",
            fmt_f64(*t),
            m.n,
            fmt_f64(m.acc),
            fmt_f64(m.ece),
            fmt_f64(m.aece),
            fmt_f64(m.oe),
            fmt_f64(m.ue),
            fmt_f64(m.nll)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub logits: PathBuf,
    pub bins: usize,
    pub temperature_file: Option<PathBuf>,
    pub out_dir: PathBuf,
}

pub fn read_temperature(path: &Path) -> Result<Temperature> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Temperature::from_csv(&text).map_err(|e| e.context(path.display().to_string()))
}

/// Writes `metrics.csv`, `reliability.csv` and, with a temperature,
/// `reliability_ts.csv`. Returns `(inputs, outputs)`.
pub fn eval_command(cfg: &EvalConfig) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    if cfg.bins == 0 {
        return Err(Error::contract("--bins must be at least 1"));
    }
    let (logits, labels) = train::read_logits(&cfg.logits)?;
    let mut inputs = vec![cfg.logits.clone()];
    let (pre, pre_table, _) = stage_metrics(&logits, &labels, 1.0, cfg.bins)?;
    let mut rows = vec![("pre_ts", 1.0, pre)];
    let mut tables = vec![("reliability.csv", pre_table)];
    if let Some(path) = &cfg.temperature_file {
        let t = read_temperature(path)?.t;
        let (post, post_table, _) = stage_metrics(&logits, &labels, t, cfg.bins)?;
        rows.push(("post_ts", t, post));
        tables.push(("reliability_ts.csv", post_table));
        inputs.push(path.clone());
    }
    create_dir(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;
    let mut outputs = vec![metrics_path];
    for (name, table) in tables {
        let path = cfg.out_dir.join(name);
        write_atomic(&path, table.to_csv().as_bytes())?;
        outputs.push(path);
    }
    Ok((inputs, outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub logits: PathBuf,
    pub out: PathBuf,
}

pub fn calibrate_command(cfg: &CalibrateConfig) -> Result<Temperature> {
    let (logits, labels) = train::read_logits(&cfg.logits)?;
    let t = calibrate::fit_temperature(&logits, &labels)?;
    write_atomic(&cfg.out, t.to_csv().as_bytes())?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodEvalConfig {
    pub id: PathBuf,
    pub ood: PathBuf,
    pub out: PathBuf,
}

/// AUROC of softmax entropy with the OOD samples as positives.
pub fn entropy_auroc(id_logits: &Tensor, ood_logits: &Tensor) -> Result<f64> {
    let id = metrics::row_entropies(&calibrate::apply_temperature(id_logits, 1.0)?);
    let ood = metrics::row_entropies(&calibrate::apply_temperature(ood_logits, 1.0)?);
    metrics::auroc(&id, &ood)
}

pub fn ood_eval_command(cfg: &OodEvalConfig) -> Result<f64> {
    let (id, _) = train::read_logits(&cfg.id)?;
    let (ood, _) = train::read_logits(&cfg.ood)?;
    if id.cols() != ood.cols() {
        return Err(Error::Shape {
            op: "ood_eval",
            left: id.shape().to_vec(),
            right: ood.shape().to_vec(),
        });
    }
    let auc = entropy_auroc(&id, &ood)?;
    let csv = format!(
        "id_file,ood_file,auroc\n{},{},{}\n",
        cfg.id.display(),
        cfg.ood.display(),
        fmt_f64(auc)
    );
    write_atomic(&cfg.out, csv.as_bytes())?;
    Ok(auc)
}
