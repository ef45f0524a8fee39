//! Brute-force oracles for the calibration and ranking metrics.

use rand::Rng as _;

use rankcal_core::metrics::{
    self, aece, auroc, ece, entropy, mann_whitney_u2, oe, predict, reliability_table, ue,
    BinScheme, PredictionSet,
};
use rankcal_core::numerics::Tensor;
use rankcal_core::rng::{seeded, Rng};

mod support;
use support::{equal_mass_oracle, equal_width_oracle, pair_count_oracle, random_set, H};

#[test]
fn binned_metrics_match_oracles_exactly() {
    let mut rng = seeded(2024, 0);
    for _ in 0..300 {
        let ps = random_set(&mut rng);
        let (cal, over, under) = equal_width_oracle(&ps);
        assert_eq!(ece(&ps, H).unwrap(), cal);
        assert_eq!(oe(&ps, H).unwrap(), over);
        assert_eq!(ue(&ps, H).unwrap(), under);
        assert_eq!(aece(&ps, H).unwrap(), equal_mass_oracle(&ps));
    }
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = seeded(77, 0);
    for _ in 0..300 {
        let draw = |rng: &mut Rng, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (rng.random_range(0..40) as f64) / 7.0)
                .collect()
        };
        let (n_id, n_ood) = (rng.random_range(1..200), rng.random_range(1..200));
        let id = draw(&mut rng, n_id);
        let ood = draw(&mut rng, n_ood);
        let twice = pair_count_oracle(&id, &ood);
        assert_eq!(mann_whitney_u2(&id, &ood), twice);
        let expected = twice as f64 / (2 * n_id as u128 * n_ood as u128) as f64;
        assert_eq!(auroc(&id, &ood).unwrap(), expected);
    }
}

#[test]
fn equal_mass_bins_have_nominal_sizes_without_ties() {
    let n = 150;
    let confidences: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let ps = PredictionSet::from_pairs(confidences, vec![true; n]).unwrap();
    let table = reliability_table(&ps, H, BinScheme::EqualMass).unwrap();
    assert!(table.bins.iter().all(|b| b.count == n / H));
}

#[test]
fn constant_confidence_is_one_effective_bin() {
    let ps =
        PredictionSet::from_pairs(vec![0.7; 40], (0..40).map(|i| i % 4 != 0).collect()).unwrap();
    assert!((aece(&ps, H).unwrap() - 0.05).abs() < 1e-12);
    let table = reliability_table(&ps, H, BinScheme::EqualMass).unwrap();
    assert_eq!(table.bins.iter().filter(|b| b.count > 0).count(), 1);
}

#[test]
fn perfectly_calibrated_construction() {
    // Ten samples at each centre h/10 + 0.05 with exactly that hit rate,
    // scaled by ten so every count is whole.
    let mut confidences = Vec::new();
    let mut correct = Vec::new();
    for h in 0..10 {
        let c = (2 * h + 1) as f64 / 20.0;
        for i in 0..20 {
            confidences.push(c);
            correct.push(i < 2 * h + 1);
        }
    }
    let ps = PredictionSet::from_pairs(confidences, correct).unwrap();
    assert!(ece(&ps, 10).unwrap() < 1e-12);
    assert!(oe(&ps, 10).unwrap() < 1e-12);
    assert!(ue(&ps, 10).unwrap() < 1e-12);
}

#[test]
fn metrics_are_folds_of_the_table() {
    let mut rng = seeded(5, 0);
    for _ in 0..50 {
        let ps = random_set(&mut rng);
        let width = reliability_table(&ps, H, BinScheme::EqualWidth).unwrap();
        assert_eq!(width.bins.len(), H);
        assert_eq!(width.bins.iter().map(|b| b.count).sum::<usize>(), ps.len());
        let n = ps.len() as f64;
        let refold: f64 = width
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.mean_acc - b.mean_conf).abs())
            .sum();
        assert_eq!(refold, ece(&ps, H).unwrap());
    }
}

#[test]
fn predict_matches_scan() {
    let mut rng = seeded(9, 0);
    for _ in 0..200 {
        let k = rng.random_range(2..7);
        let mut row: Vec<f64> = (0..k)
            .map(|_| rng.random_range(0..5) as f64 + 1.0)
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        let label = rng.random_range(0..k);
        let ps = predict(&Tensor::matrix(1, k, row.clone()).unwrap(), &[label]).unwrap();
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        assert_eq!(ps.predicted()[0], best);
        assert_eq!(ps.confidences()[0], row[best]);
        assert_eq!(ps.correct()[0], best == label);
    }
}

#[test]
fn entropy_matches_direct_sum() {
    let mut rng = seeded(10, 0);
    for _ in 0..200 {
        let k = rng.random_range(1..10);
        let mut row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        let mut h = 0.0;
        for &p in &row {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        assert!((entropy(&row) - h).abs() < 1e-15);
    }
    assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
    assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    let rows = Tensor::matrix(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
    assert_eq!(metrics::row_entropies(&rows), vec![2f64.ln(), 0.0]);
}
