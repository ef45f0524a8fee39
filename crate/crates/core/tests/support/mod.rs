//! Brute-force oracles shared by the test suites.

#![allow(dead_code)]

use rand::Rng as _;

use rankcal_core::losses::{m_ndcg, GroupConfidences};
use rankcal_core::metrics::PredictionSet;
use rankcal_core::numerics::{Graph, Tensor, Var};
use rankcal_core::rng::Rng;

pub const H: usize = 15;

/// Confidences drawn from a mix of continuous values, exact bin edges,
/// repeated values and the endpoints.
pub fn random_set(rng: &mut Rng) -> PredictionSet {
    let n = rng.random_range(1..=500);
    let pool: Vec<f64> = (0..rng.random_range(1..8))
        .map(|_| rng.random::<f64>())
        .collect();
    let confidences: Vec<f64> = (0..n)
        .map(|_| match rng.random_range(0..6) {
            0 => rng.random_range(0..=H) as f64 / H as f64,
            1 => pool[rng.random_range(0..pool.len())],
            2 if rng.random_bool(0.1) => 0.0,
            2 => 1.0,
            _ => rng.random::<f64>(),
        })
        .collect();
    let correct = confidences
        .iter()
        .map(|&c| rng.random_bool(c.clamp(0.05, 0.95)))
        .collect();
    PredictionSet::from_pairs(confidences, correct).unwrap()
}

struct BinStats {
    count: usize,
    conf: f64,
    acc: f64,
}

/// Folds bin members (in the order given) into weighted sums.
pub fn fold(members: &[Vec<(f64, bool)>], n: usize) -> (f64, f64, f64) {
    let stats: Vec<BinStats> = members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let mut conf_sum = 0.0;
            let mut hits = 0;
            for &(c, hit) in m {
                conf_sum += c;
                hits += usize::from(hit);
            }
            BinStats {
                count: m.len(),
                conf: conf_sum / m.len() as f64,
                acc: hits as f64 / m.len() as f64,
            }
        })
        .collect();
    let (mut cal, mut over, mut under) = (0.0, 0.0, 0.0);
    for s in &stats {
        let w = s.count as f64 / n as f64;
        cal += w * (s.acc - s.conf).abs();
        over += w * (s.conf * (s.conf - s.acc).max(0.0));
        under += w * (s.conf * (s.acc - s.conf).max(0.0));
    }
    (cal, over, under)
}

/// Two passes: bin index per sample by scanning every interval, then
/// per-bin accumulation.
pub fn equal_width_oracle(ps: &PredictionSet) -> (f64, f64, f64) {
    let hf = H as f64;
    let assignment: Vec<usize> = ps
        .confidences()
        .iter()
        .map(|&c| {
            (0..H)
                .find(|&h| {
                    let (lo, hi) = (h as f64 / hf, (h + 1) as f64 / hf);
                    (c > lo || (h == 0 && c == 0.0)) && c <= hi
                })
                .expect("confidence inside [0, 1]")
        })
        .collect();
    let mut members = vec![Vec::new(); H];
    for (i, &b) in assignment.iter().enumerate() {
        members[b].push((ps.confidences()[i], ps.correct()[i]));
    }
    fold(&members, ps.len())
}

/// Sort, chunk by nominal sizes, then give every run of equal confidences
/// the chunk of its first element.
pub fn equal_mass_oracle(ps: &PredictionSet) -> f64 {
    let n = ps.len();
    let mut pairs: Vec<(f64, bool)> = ps
        .confidences()
        .iter()
        .copied()
        .zip(ps.correct().iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let sizes: Vec<usize> = (0..H).map(|h| n / H + usize::from(h < n % H)).collect();
    let nominal = |j: usize| {
        let mut cumulative = 0;
        for (h, s) in sizes.iter().enumerate() {
            cumulative += s;
            if j < cumulative {
                return h;
            }
        }
        unreachable!()
    };
    let mut members = vec![Vec::new(); H];
    let mut run_start = 0;
    for j in 0..n {
        if j > 0 && pairs[j].0 != pairs[j - 1].0 {
            run_start = j;
        }
        members[nominal(run_start)].push(pairs[j]);
    }
    fold(&members, n).0
}

pub fn pair_count_oracle(id: &[f64], ood: &[f64]) -> u128 {
    let mut twice = 0u128;
    for &a in id {
        for &b in ood {
            if b > a {
                twice += 2;
            } else if b == a {
                twice += 1;
            }
        }
    }
    twice
}

/// Builds one-group-per-row confidences: `conf[b][0]` is raw, the rest are
/// augmented.
pub fn groups(
    g: &mut Graph,
    conf: &[Vec<f64>],
    lambdas: &[Vec<f64>],
) -> (GroupConfidences, Vec<Var>) {
    let q = conf[0].len();
    let cols: Vec<Var> = (0..q)
        .map(|j| g.param(Tensor::vector(conf.iter().map(|r| r[j]).collect()).unwrap()))
        .collect();
    let gc = GroupConfidences::new(g, cols[0], cols[1..].to_vec(), lambdas.to_vec()).unwrap();
    (gc, cols)
}

pub fn ndcg_loss(conf: &[f64], lambdas: &[f64]) -> f64 {
    let mut g = Graph::new();
    let (gc, _) = groups(&mut g, &[conf.to_vec()], &[lambdas.to_vec()]);
    let loss = m_ndcg(&mut g, &gc).unwrap();
    g.value(loss).item()
}

/// Every permutation of `items`, by repeated insertion.
pub fn permutations(items: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for &x in items {
        let mut next = Vec::new();
        for p in &out {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, x);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Largest value to the raw slot, then the rest following the λ ranks.
pub fn aligned(values: &[f64], lambdas: &[f64]) -> Vec<f64> {
    let q = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out = vec![0.0; q];
    out[0] = sorted[0];
    let mut order: Vec<usize> = (0..q - 1).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    for (rank, &r) in order.iter().enumerate() {
        out[r + 1] = sorted[rank + 1];
    }
    out
}
