//! One-axis hyperparameter sweeps over freshly generated data per seed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rankcal_core::calibrate;
use rankcal_core::datasets::{fmt_f64, write_atomic};
use rankcal_core::{Error, Result};

use crate::pipeline::{self, DataConfig, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Margin,
    Q,
    Alpha,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Margin => "margin",
            Axis::Q => "q",
            Axis::Alpha => "alpha",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Axis::Margin),
            "q" => Ok(Axis::Q),
            "alpha" => Ok(Axis::Alpha),
            other => Err(Error::contract(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl Axis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainSettings, value: f64) -> Result<TrainSettings> {
        let mut s = base.clone();
        match self {
            Axis::Margin => s.margin = value,
            Axis::Alpha => s.alpha = value,
            Axis::Q => {
                if value.fract() != 0.0 || value < 2.0 {
                    return Err(Error::contract(format!(
                        "q must be an integer of at least 2, got {value}"
                    )));
                }
                s.q = value as usize;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: Axis,
    pub values: Vec<f64>,
    /// Seeds `seed, seed + 1, ..., seed + seeds − 1`.
    pub seeds: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub settings: TrainSettings,
    pub ood_shift: Option<f64>,
    pub bins: usize,
    pub jobs: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub acc: f64,
    pub ece: f64,
    pub aece: f64,
    pub oe: f64,
    pub ue: f64,
    pub ece_post_ts: f64,
    pub acc_post_ts: f64,
    pub temperature: f64,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: f64,
    pub seed: u64,
    pub result: std::result::Result<PointMetrics, String>,
}

/// Trains and evaluates one point. Data, split, initialisation and training
/// all use `seed`.
pub fn run_point(cfg: &SweepConfig, value: f64, seed: u64) -> Result<PointMetrics> {
    let mut settings = cfg.axis.apply(&cfg.settings, value)?;
    settings.seed = seed;
    settings.init_seed = seed;
    let splits = pipeline::synthetic_splits(&cfg.data, seed, cfg.ood_shift)?;
    let ckpt = settings.fit(&splits.train, &splits.val)?;

    let val_logits = ckpt.model.logits(&splits.val.features_tensor())?;
    let temperature = calibrate::fit_temperature(&val_logits, splits.val.labels())?;
    let test_logits = ckpt.model.logits(&splits.test.features_tensor())?;
    let (pre, _, _) = pipeline::stage_metrics(&test_logits, splits.test.labels(), 1.0, cfg.bins)?;
    let (post, _, _) =
        pipeline::stage_metrics(&test_logits, splits.test.labels(), temperature.t, cfg.bins)?;
    let auroc = match &splits.ood {
        Some(ood) => {
            let ood_logits = ckpt.model.logits(&ood.features_tensor())?;
            Some(pipeline::entropy_auroc(&test_logits, &ood_logits)?)
        }
        None => None,
    };
    Ok(PointMetrics {
        acc: pre.acc,
        ece: pre.ece,
        aece: pre.aece,
        oe: pre.oe,
        ue: pre.ue,
        ece_post_ts: post.ece,
        acc_post_ts: post.acc,
        temperature: temperature.t,
        val_nll_before: temperature.val_nll_before,
        val_nll_after: temperature.val_nll_after,
        auroc,
    })
}

/// Runs every (value, seed) point, up to `jobs` at a time. Rows come back
/// in (value, seed) order regardless of scheduling; a failing point is
/// recorded in its row and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.values.is_empty() || cfg.seeds == 0 {
        return Err(Error::contract(
            "sweep needs at least one value and one seed",
        ));
    }
    if cfg.bins == 0 {
        return Err(Error::contract("--bins must be at least 1"));
    }
    for &v in &cfg.values {
        cfg.axis
            .apply(&cfg.settings, v)?
            .train_config()
            .validate()?;
    }
    let points: Vec<(f64, u64)> = cfg
        .values
        .iter()
        .flat_map(|&v| (0..cfg.seeds as u64).map(move |i| (v, cfg.seed + i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|&(value, seed)| {
                let result = run_point(cfg, value, seed).map_err(|e| {
                    log::error!("{} = {value}, seed {seed}: {e}", cfg.axis);
                    e.to_string()
                });
                SweepRow {
                    axis: cfg.axis,
                    value,
                    seed,
                    result,
                }
            })
            .collect()
    });
    Ok(rows)
}

pub const SWEEP_HEADER: &str =
    "axis,value,seed,acc,ece,aece,oe,ue,ece_post_ts,acc_post_ts,temperature,val_nll_before,val_nll_after,auroc,status";

/// Long-form CSV, one row per run. Failed runs leave the metric fields empty
/// and carry the error in `status`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{},", row.axis, row.value, row.seed));
        match &row.result {
            Ok(m) => {
                for v in [
                    m.acc,
                    m.ece,
                    m.aece,
                    m.oe,
                    m.ue,
                    m.ece_post_ts,
                    m.acc_post_ts,
                    m.temperature,
                    m.val_nll_before,
                    m.val_nll_after,
                ] {
                    out.push_str(&fmt_f64(v));
                    out.push(',');
                }
                out.push_str(&m.auroc.map(fmt_f64).unwrap_or_default());
                out.push_str(",ok\n");
            }
            Err(e) => {
                out.push_str(&",".repeat(11));
                out.push_str(&format!("error: {}\n", e.replace([',', '\n', '\r'], ";")));
            }
        }
    }
    out
}

pub fn sweep_command(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(cfg)?;
    write_atomic(&cfg.out, sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}
