//! Evaluation metrics: accuracy, binned calibration errors, predictive
//! entropy and AUROC.
//!
//! ECE, AECE, OE and UE are folds over a [`ReliabilityTable`]. Equal-width
//! bins are `(h/H, (h+1)/H]` with the first bin closed at 0. Equal-mass bins
//! split the ascending confidences into `H` runs of `⌊N/H⌋` or `⌈N/H⌉`
//! samples (larger runs first), moving a boundary forward when it would
//! separate equal confidences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{first_argmax, Tensor};

/// Predicted classes, their confidences and correctness flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    confidences: Vec<f64>,
    predicted: Vec<usize>,
    correct: Vec<bool>,
}

impl PredictionSet {
    pub fn new(confidences: Vec<f64>, predicted: Vec<usize>, correct: Vec<bool>) -> Result<Self> {
        if confidences.len() != predicted.len() || confidences.len() != correct.len() {
            return Err(Error::contract("prediction set fields differ in length"));
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::contract(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self {
            confidences,
            predicted,
            correct,
        })
    }

    /// Convenience constructor for confidence/correctness pairs where the
    /// predicted class is irrelevant.
    pub fn from_pairs(confidences: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        let predicted = vec![0; confidences.len()];
        Self::new(confidences, predicted, correct)
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn correct(&self) -> &[bool] {
        &self.correct
    }

    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }
}

/// Arg-max class (lowest index on ties), its probability and whether it
/// matches the label. Rows must sum to 1 within 1e-9.
pub fn predict(probs: &Tensor, labels: &[usize]) -> Result<PredictionSet> {
    let (n, k) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(Error::Shape {
            op: "predict",
            left: probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut confidences = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        let off = (sum - 1.0).abs();
        if off.is_nan() || off > 1e-9 || row.iter().any(|p| *p < 0.0) {
            return Err(Error::contract(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
        if label >= k {
            return Err(Error::contract(format!(
                "row {i}: label {label} is not below {k}"
            )));
        }
        let (j, p) = first_argmax(row);
        confidences.push(p.min(1.0));
        predicted.push(j);
        correct.push(j == label);
    }
    PredictionSet::new(confidences, predicted, correct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinScheme {
    EqualWidth,
    EqualMass,
}

impl fmt::Display for BinScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BinScheme::EqualWidth => "equal-width",
            BinScheme::EqualMass => "equal-mass",
        })
    }
}

impl FromStr for BinScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" | "width" => Ok(BinScheme::EqualWidth),
            "equal-mass" | "mass" | "adaptive" => Ok(BinScheme::EqualMass),
            other => Err(Error::contract(format!("unknown binning scheme {other:?}"))),
        }
    }
}

/// Per-bin statistics. Empty bins report zero means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityTable {
    pub bins: Vec<Bin>,
    pub scheme: BinScheme,
    pub total: usize,
}

impl ReliabilityTable {
    fn fold(&self, term: impl Fn(&Bin) -> f64) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * term(b))
            .sum()
    }

    /// Bin-weighted mean of `|acc − conf|`.
    pub fn calibration_error(&self) -> f64 {
        self.fold(|b| (b.mean_acc - b.mean_conf).abs())
    }

    /// Bin-weighted `conf · max(conf − acc, 0)`.
    pub fn overconfidence_error(&self) -> f64 {
        self.fold(|b| b.mean_conf * (b.mean_conf - b.mean_acc).max(0.0))
    }

    /// Bin-weighted `conf · max(acc − conf, 0)`.
    pub fn underconfidence_error(&self) -> f64 {
        self.fold(|b| b.mean_conf * (b.mean_acc - b.mean_conf).max(0.0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lower,bin_upper,count,mean_conf,mean_acc\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                crate::datasets::fmt_f64(b.lower),
                crate::datasets::fmt_f64(b.upper),
                b.count,
                crate::datasets::fmt_f64(b.mean_conf),
                crate::datasets::fmt_f64(b.mean_acc),
            ));
        }
        out
    }
}

/// Index of the equal-width bin `(h/H, (h+1)/H]` containing `c`, judged
/// against the same `h as f64 / H as f64` boundaries the table reports.
pub fn equal_width_bin(c: f64, bins: usize) -> usize {
    let hf = bins as f64;
    let mut idx = ((c * hf).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx > 0 && c <= idx as f64 / hf {
        idx -= 1;
    }
    while idx + 1 < bins && c > (idx + 1) as f64 / hf {
        idx += 1;
    }
    idx
}

fn check_args(ps: &PredictionSet, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::contract("bin count must be at least 1"));
    }
    if ps.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct Accum {
    count: usize,
    conf_sum: f64,
    hits: usize,
}

impl Accum {
    fn add(&mut self, conf: f64, hit: bool) {
        self.count += 1;
        self.conf_sum += conf;
        self.hits += usize::from(hit);
    }

    fn bin(self, lower: f64, upper: f64) -> Bin {
        let (mean_conf, mean_acc) = if self.count == 0 {
            (0.0, 0.0)
        } else {
            let n = self.count as f64;
            (self.conf_sum / n, self.hits as f64 / n)
        };
        Bin {
            lower,
            upper,
            count: self.count,
            mean_conf,
            mean_acc,
        }
    }
}

/// End offsets of the equal-mass bins over `sorted` confidences.
pub fn equal_mass_boundaries(sorted: &[f64], bins: usize) -> Vec<usize> {
    let n = sorted.len();
    let (base, rem) = (n / bins, n % bins);
    let mut ends = Vec::with_capacity(bins);
    let (mut nominal, mut prev) = (0, 0);
    for h in 0..bins {
        nominal += base + usize::from(h < rem);
        let mut end = nominal.max(prev);
        while end > 0 && end < n && sorted[end] == sorted[end - 1] {
            end += 1;
        }
        ends.push(end);
        prev = end;
    }
    ends
}

pub fn reliability_table(
    ps: &PredictionSet,
    bins: usize,
    scheme: BinScheme,
) -> Result<ReliabilityTable> {
    check_args(ps, bins)?;
    let table = match scheme {
        BinScheme::EqualWidth => {
            let mut acc = vec![Accum::default(); bins];
            for (&c, &hit) in ps.confidences.iter().zip(&ps.correct) {
                acc[equal_width_bin(c, bins)].add(c, hit);
            }
            let hf = bins as f64;
            acc.into_iter()
                .enumerate()
                .map(|(h, a)| a.bin(h as f64 / hf, (h + 1) as f64 / hf))
                .collect()
        }
        BinScheme::EqualMass => {
            let mut order: Vec<usize> = (0..ps.len()).collect();
            order.sort_by(|&a, &b| ps.confidences[a].total_cmp(&ps.confidences[b]));
            let sorted: Vec<f64> = order.iter().map(|&i| ps.confidences[i]).collect();
            let mut start = 0;
            equal_mass_boundaries(&sorted, bins)
                .into_iter()
                .map(|end| {
                    let mut a = Accum::default();
                    for &i in &order[start..end] {
                        a.add(ps.confidences[i], ps.correct[i]);
                    }
                    let (lower, upper) = if end > start {
                        (sorted[start], sorted[end - 1])
                    } else {
                        (0.0, 0.0)
                    };
                    start = end;
                    a.bin(lower, upper)
                })
                .collect()
        }
    };
    Ok(ReliabilityTable {
        bins: table,
        scheme,
        total: ps.len(),
    })
}

/// Expected calibration error over `bins` equal-width bins.
pub fn ece(ps: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(ps, bins, BinScheme::EqualWidth)?.calibration_error())
}

/// Adaptive ECE over `bins` equal-mass bins.
pub fn aece(ps: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(ps, bins, BinScheme::EqualMass)?.calibration_error())
}

/// Overconfidence error over equal-width bins.
pub fn oe(ps: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(ps, bins, BinScheme::EqualWidth)?.overconfidence_error())
}

/// Underconfidence error over equal-width bins.
pub fn ue(ps: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(ps, bins, BinScheme::EqualWidth)?.underconfidence_error())
}

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Entropy of every row.
pub fn row_entropies(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows()).map(|i| entropy(probs.row(i))).collect()
}

/// Twice the Mann–Whitney U statistic of the OOD scores: twice the number of
/// (id, ood) pairs with the OOD score higher, plus the number of ties.
pub fn mann_whitney_u2(scores_id: &[f64], scores_ood: &[f64]) -> u128 {
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Doubled mid-ranks keep everything in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        rank_sum2 += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u128;
        i = j + 1;
    }
    let m = scores_ood.len() as u128;
    rank_sum2 - m * (m + 1)
}

/// Area under the ROC curve with OOD as the positive class, from the rank
/// statistic: `(#pairs ood > id + ½·#ties) / (n_id·n_ood)`.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::contract(
            "AUROC needs at least one score in each group",
        ));
    }
    if scores_id.iter().chain(scores_ood).any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score in AUROC input".into()));
    }
    let u2 = mann_whitney_u2(scores_id, scores_ood);
    Ok(u2 as f64 / (2 * scores_id.len() as u128 * scores_ood.len() as u128) as f64)
}
