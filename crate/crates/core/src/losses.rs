//! Training objectives: cross-entropy on raw samples, the mixup ranking
//! hinge loss (MRL) and the mixup NDCG loss (M-NDCG).
//!
//! Confidences are batched: a [`GroupConfidences`] holds one raw confidence
//! per anchor and `q − 1` augmented confidences per anchor, each as a
//! length-`B` vector on the graph. A single group is the `B = 1` case.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    CeOnly,
    #[serde(rename = "mrl")]
    Mrl,
    #[serde(rename = "m-ndcg")]
    MNdcg,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::CeOnly => "ce",
            LossMode::Mrl => "mrl",
            LossMode::MNdcg => "m-ndcg",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "ce-only" | "ce_only" => Ok(LossMode::CeOnly),
            "mrl" => Ok(LossMode::Mrl),
            "m-ndcg" | "m_ndcg" | "mndcg" => Ok(LossMode::MNdcg),
            other => Err(Error::contract(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the calibration term.
    pub w: f64,
    /// MRL margin.
    pub m: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::MNdcg,
            w: 0.1,
            m: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(Error::contract(format!(
                "loss weight must be finite and >= 0, got {}",
                self.w
            )));
        }
        if !(self.m.is_finite() && self.m >= 0.0) {
            return Err(Error::contract(format!(
                "margin must be finite and >= 0, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Graph-connected confidences of a batch of mixup groups.
#[derive(Debug, Clone)]
pub struct GroupConfidences {
    raw: Var,
    aug: Vec<Var>,
    lambdas: Vec<Vec<f64>>,
}

impl GroupConfidences {
    /// `raw` has shape `[B]`; `aug[r]` has shape `[B]` and holds the
    /// confidences of the `r`-th mixed sample of every group; `lambdas[i][r]`
    /// is the folded coefficient of that sample.
    pub fn new(graph: &Graph, raw: Var, aug: Vec<Var>, lambdas: Vec<Vec<f64>>) -> Result<Self> {
        let b = match *graph.value(raw).shape() {
            [b] => b,
            ref s => {
                return Err(Error::contract(format!(
                    "raw confidences must be a vector, got {s:?}"
                )))
            }
        };
        if aug.is_empty() {
            return Err(Error::contract(
                "at least one augmented confidence is required",
            ));
        }
        for &a in &aug {
            if graph.value(a).shape() != [b] {
                return Err(Error::Shape {
                    op: "group_confidences",
                    left: vec![b],
                    right: graph.value(a).shape().to_vec(),
                });
            }
        }
        if lambdas.len() != b || lambdas.iter().any(|l| l.len() != aug.len()) {
            return Err(Error::contract(format!(
                "expected {b} coefficient rows of length {}",
                aug.len()
            )));
        }
        Ok(Self { raw, aug, lambdas })
    }

    pub fn raw(&self) -> Var {
        self.raw
    }

    pub fn aug(&self) -> &[Var] {
        &self.aug
    }

    pub fn lambdas(&self) -> &[Vec<f64>] {
        &self.lambdas
    }

    /// Group size, counting the raw sample.
    pub fn q(&self) -> usize {
        self.aug.len() + 1
    }

    pub fn batch(&self) -> usize {
        self.lambdas.len()
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`,
/// evaluated through log-softmax.
pub fn cross_entropy(graph: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_p = graph.log_softmax(logits)?;
    let picked = graph.gather(log_p, labels)?;
    let mean = graph.mean(picked);
    Ok(graph.scale(mean, -1.0))
}

/// Mixup ranking loss: mean over every augmented sample of
/// `max(0, m − (raw − aug))`.
///
/// Written as `m − gap` so that the loss is exactly zero precisely when
/// `raw − aug ≥ m` holds in floating point.
pub fn mrl(graph: &mut Graph, g: &GroupConfidences, m: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &aug in &g.aug {
        let gap = graph.sub(g.raw, aug)?;
        let neg = graph.scale(gap, -1.0);
        let shortfall = graph.add_scalar(neg, m);
        let hinge = graph.relu(shortfall);
        total = Some(match total {
            None => hinge,
            Some(t) => graph.add(t, hinge)?,
        });
    }
    let total = total.expect("at least one augmented sample");
    let summed = graph.sum(total);
    let count = (g.batch() * g.aug.len()) as f64;
    Ok(graph.scale(summed, 1.0 / count))
}

/// Discount `1 / log2(position + 1)` for 1-based positions `1..=q`.
pub fn discounts(q: usize) -> Vec<f64> {
    (1..=q).map(|p| 1.0 / ((p + 1) as f64).log2()).collect()
}

/// Augmented-sample indices ordered by descending coefficient; ties keep
/// their original order.
pub fn lambda_order(lambdas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    order
}

/// DCG and IDCG of every group.
///
/// Position 1 holds the raw confidence with ground truth 1; positions
/// `2..=q` hold the augmented confidences ordered by their coefficients,
/// so confidence and coefficient at a position always belong to the same
/// sample. DCG stays on the graph; IDCG is a constant.
pub fn dcg_idcg(graph: &mut Graph, g: &GroupConfidences) -> Result<(Var, Vec<f64>)> {
    let q = g.q();
    let weights = discounts(q);
    let mut columns = Vec::with_capacity(q);
    columns.push(g.raw);
    columns.extend_from_slice(&g.aug);
    let stacked = graph.stack_cols(&columns)?;

    let mut perms = Vec::with_capacity(g.batch());
    let mut idcg = Vec::with_capacity(g.batch());
    let mut gains = Vec::with_capacity(q);
    for lambdas in &g.lambdas {
        let order = lambda_order(lambdas);
        let mut perm = Vec::with_capacity(q);
        perm.push(0);
        perm.extend(order.iter().map(|&r| r + 1));
        gains.clear();
        gains.push(1.0);
        gains.extend(order.iter().map(|&r| lambdas[r]));
        idcg.push(crate::numerics::weighted_sum(&gains, &weights));
        perms.push(perm);
    }
    let ranked = graph.permute_rows(stacked, &perms)?;
    let dcg = graph.weighted_row_sum(ranked, weights)?;
    Ok((dcg, idcg))
}

/// `1 − DCG/IDCG`, averaged over groups. Not clamped: it is negative when
/// confidences exceed their coefficients.
pub fn m_ndcg(graph: &mut Graph, g: &GroupConfidences) -> Result<Var> {
    let (dcg, idcg) = dcg_idcg(graph, g)?;
    let ndcg = graph.div_const(dcg, idcg)?;
    let mean = graph.mean(ndcg);
    let neg = graph.scale(mean, -1.0);
    Ok(graph.add_scalar(neg, 1.0))
}

/// The calibration term selected by `cfg`, or `None` for cross-entropy only.
pub fn calibration_term(
    graph: &mut Graph,
    g: &GroupConfidences,
    cfg: &LossConfig,
) -> Result<Option<Var>> {
    match cfg.mode {
        LossMode::CeOnly => Ok(None),
        LossMode::Mrl => mrl(graph, g, cfg.m).map(Some),
        LossMode::MNdcg => m_ndcg(graph, g).map(Some),
    }
}

/// `ce + w·calib`; plain `ce` in cross-entropy-only mode.
pub fn total_loss(graph: &mut Graph, ce: Var, calib: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match (cfg.mode, calib) {
        (LossMode::CeOnly, _) => Ok(ce),
        (_, None) => Err(Error::contract(format!(
            "loss mode {} needs a calibration term",
            cfg.mode
        ))),
        (_, Some(c)) => {
            let weighted = graph.scale(c, cfg.w);
            graph.add(ce, weighted)
        }
    }
}
