//! Vanilla mixup with Beta(α, α) coefficients, and the multi-sample groups
//! used by the ranking losses.
//!
//! Groups carry mixed feature rows and their coefficients only. There is
//! no interpolated-label output anywhere in this module.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Symmetric shape parameter of Beta(α, α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
}

impl BetaParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::contract(format!(
                "Beta shape must be finite and positive, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Gamma(shape, 1) by Marsaglia and Tsang's squeeze-rejection method.
/// Shapes below one are boosted through Gamma(shape + 1)·U^(1/shape).
pub fn sample_gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let g = sample_gamma(shape + 1.0, rng);
        let u: f64 = rng.random();
        // u ∈ [0, 1); 1 − u keeps the base of the power strictly positive
        return g * (1.0 - u).powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 {
            return d * v;
        }
        if u > 0.0 && u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// One draw from Beta(α, α) as a ratio of Gamma draws. The result is
/// kept strictly inside (0, 1).
pub fn sample_beta(params: BetaParams, rng: &mut Rng) -> f64 {
    loop {
        let x = sample_gamma(params.alpha, rng);
        let y = sample_gamma(params.alpha, rng);
        let s = x + y;
        if s > 0.0 {
            let l = x / s;
            if l > 0.0 && l < 1.0 {
                return l;
            }
        }
    }
}

/// Maps a coefficient to the dominant side: `max(l, 1 − l)`.
pub fn fold_lambda(l: f64) -> f64 {
    l.max(1.0 - l)
}

/// `λ·a + (1 − λ)·b`, elementwise.
pub fn mix_pair(a: &[f64], b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "mix_pair",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if !(0.5..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "mixing coefficient {lambda} outside [0.5, 1]"
        )));
    }
    let rest = 1.0 - lambda;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| lambda * x + rest * y)
        .collect())
}

/// A raw anchor together with its `q − 1` mixed companions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupGroup {
    pub anchor_index: usize,
    pub partner_indices: Vec<usize>,
    /// Folded coefficients, each in `[0.5, 1]`, in draw order.
    pub lambdas: Vec<f64>,
    /// `(q − 1) × dim`, row-major; row `r` mixes the anchor with partner `r`.
    pub mixed_inputs: Vec<f64>,
    pub q: usize,
}

impl MixupGroup {
    pub fn mixed_row(&self, r: usize) -> &[f64] {
        let dim = self.mixed_inputs.len() / (self.q - 1);
        &self.mixed_inputs[r * dim..(r + 1) * dim]
    }
}

/// Builds one group per row of `batch`.
///
/// Partners come from `q − 1` independent permutations of the batch; a
/// permutation that maps a row to itself is rerolled to a uniformly chosen
/// other row. Coefficients are drawn independently per mixed sample and
/// folded. Only features are taken, so labels cannot leak into the groups.
pub fn build_groups(
    batch: &Tensor,
    q: usize,
    params: BetaParams,
    rng: &mut Rng,
) -> Result<Vec<MixupGroup>> {
    if batch.shape().len() != 2 {
        return Err(Error::contract(format!(
            "batch must be a matrix, got {:?}",
            batch.shape()
        )));
    }
    let (n, dim) = (batch.rows(), batch.cols());
    if n < 2 {
        return Err(Error::contract(format!(
            "mixup needs a batch of at least 2, got {n}"
        )));
    }
    if q < 2 {
        return Err(Error::contract(format!(
            "group size must be at least 2, got {q}"
        )));
    }

    let mut partners = vec![Vec::with_capacity(q - 1); n];
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..q - 1 {
        perm.shuffle(rng);
        for (i, &p) in perm.iter().enumerate() {
            let partner = if p == i {
                let j = rng.random_range(0..n - 1);
                if j >= i {
                    j + 1
                } else {
                    j
                }
            } else {
                p
            };
            partners[i].push(partner);
        }
    }

    let mut groups = Vec::with_capacity(n);
    for (i, partner_indices) in partners.into_iter().enumerate() {
        let mut lambdas = Vec::with_capacity(q - 1);
        let mut mixed_inputs = Vec::with_capacity((q - 1) * dim);
        for &j in &partner_indices {
            let lambda = fold_lambda(sample_beta(params, rng));
            mixed_inputs.extend(mix_pair(batch.row(i), batch.row(j), lambda)?);
            lambdas.push(lambda);
        }
        groups.push(MixupGroup {
            anchor_index: i,
            partner_indices,
            lambdas,
            mixed_inputs,
            q,
        });
    }
    Ok(groups)
}

/// Stacks the `r`-th mixed row of every group into an `n × dim` matrix.
pub fn mixed_batch(groups: &[MixupGroup], r: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = groups.iter().map(|g| g.mixed_row(r).to_vec()).collect();
    Tensor::from_rows(&rows)
}
