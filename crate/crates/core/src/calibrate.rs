//! Post-hoc temperature scaling.
//!
//! The temperature is fitted by golden-section search on `ln T` over
//! `[ln 0.05, ln 10]`, minimising the mean validation NLL of
//! `softmax(z / T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Tensor};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 10.0;
/// Absolute tolerance of the search in `ln T`.
pub const LOG_T_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemperatureWarning {
    /// Every logit row is constant; the temperature has no effect.
    DegenerateLogits,
    /// The optimum sits at an end of the search range.
    RangeClipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub t: f64,
    pub val_nll_before: f64,
    pub val_nll_after: f64,
    pub warning: Option<TemperatureWarning>,
}

impl Temperature {
    pub fn to_csv(&self) -> String {
        format!(
            "T,val_nll_before,val_nll_after\n{},{},{}\n",
            crate::datasets::fmt_f64(self.t),
            crate::datasets::fmt_f64(self.val_nll_before),
            crate::datasets::fmt_f64(self.val_nll_after)
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "T,val_nll_before,val_nll_after" {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected temperature header {header:?}"),
            });
        }
        let row = lines.next().ok_or(Error::Parse {
            line: 2,
            message: "missing temperature row".into(),
        })?;
        let values: Vec<f64> = row
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 2,
                message: e.to_string(),
            })?;
        match values[..] {
            [t, before, after] if t > 0.0 && t.is_finite() => Ok(Self {
                t,
                val_nll_before: before,
                val_nll_after: after,
                warning: None,
            }),
            _ => Err(Error::Parse {
                line: 2,
                message: format!("expected a positive T and two NLL values, found {row:?}"),
            }),
        }
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn nll_at(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let k = logits.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| ((z - max) / t).exp()).sum::<f64>().ln();
        debug_assert!(y < k);
        total += lse - (row[y] - max) / t;
    }
    total / labels.len() as f64
}

fn check_inputs(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(Error::contract(format!(
            "logits must be a matrix, got {:?}",
            logits.shape()
        )));
    }
    if labels.is_empty() || labels.len() != logits.rows() {
        return Err(Error::Shape {
            op: "fit_temperature",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::contract(format!(
            "label {y} is not below {}",
            logits.cols()
        )));
    }
    if logits.data().iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logit".into()));
    }
    Ok(())
}

/// Fits the NLL-minimising temperature on validation logits.
///
/// The result never has a higher NLL than `T = 1`.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<Temperature> {
    check_inputs(logits, labels)?;
    let before = nll_at(logits, labels, 1.0);
    let degenerate = (0..logits.rows()).all(|i| {
        let row = logits.row(i);
        row.iter().all(|&z| z == row[0])
    });
    if degenerate {
        return Ok(Temperature {
            t: 1.0,
            val_nll_before: before,
            val_nll_after: before,
            warning: Some(TemperatureWarning::DegenerateLogits),
        });
    }

    let f = |u: f64| nll_at(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let u = 0.5 * (a + b);
    let mut t = u.exp();
    let mut after = f(u);
    let clipped = u - T_MIN.ln() < LOG_T_TOLERANCE || T_MAX.ln() - u < LOG_T_TOLERANCE;
    if after.is_nan() || after > before {
        t = 1.0;
        after = before;
    }
    if clipped {
        log::warn!("temperature optimum {t} is at the edge of [{T_MIN}, {T_MAX}]");
    }
    Ok(Temperature {
        t,
        val_nll_before: before,
        val_nll_after: after,
        warning: clipped.then_some(TemperatureWarning::RangeClipped),
    })
}

/// `softmax(z / t)` for every row. Arg-max is unchanged for any `t > 0`.
pub fn apply_temperature(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let k = logits.cols();
    let mut data: Vec<f64> = logits.data().iter().map(|z| z / t).collect();
    for row in data.chunks_exact_mut(k) {
        softmax_in_place(row);
    }
    Tensor::new(logits.shape().to_vec(), data)
}
