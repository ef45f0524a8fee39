use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use rankcal_core::calibrate::apply_temperature;
use rankcal_core::datasets::{LabeledDataset, SplitTag};
use rankcal_core::losses::{LossConfig, LossMode};
use rankcal_core::metrics::predict;
use rankcal_core::mixup::{build_groups, BetaParams};
use rankcal_core::numerics::{grad_check_many, Tensor};
use rankcal_core::rng::{seeded, stream, Rng};
use rankcal_core::train::{
    self, batch_objective, epoch_batches, fit, init_model, Checkpoint, ModelSpec, TrainConfig,
};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_dataset(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = seeded(seed, 100);
    let features = (0..n * dim).map(|_| normal(&mut rng)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    LabeledDataset::new(features, dim, labels, classes, SplitTag::Train).unwrap()
}

fn tiny_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        input_dim: 3,
        hidden: vec![5],
        classes: 3,
        init_seed: seed,
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    let spec = ModelSpec {
        input_dim: 4,
        hidden: vec![6, 5],
        classes: 3,
        init_seed: 11,
    };
    let model = init_model(&spec).unwrap();
    let mut rng = seeded(12, 0);
    let x = Tensor::matrix(5, 4, (0..20).map(|_| normal(&mut rng)).collect()).unwrap();
    let labels = [0, 2, 1, 1, 0];
    let groups = build_groups(&x, 3, BetaParams::new(2.0).unwrap(), &mut rng).unwrap();
    for cfg in [
        LossConfig {
            mode: LossMode::CeOnly,
            w: 0.1,
            m: 1.0,
        },
        LossConfig {
            mode: LossMode::Mrl,
            w: 0.1,
            m: 0.05,
        },
        LossConfig {
            mode: LossMode::MNdcg,
            w: 0.1,
            m: 2.0,
        },
        LossConfig {
            mode: LossMode::MNdcg,
            w: 5.0,
            m: 2.0,
        },
    ] {
        let err = grad_check_many(
            |g, vars| batch_objective(g, vars, &x, &labels, &groups, &cfg),
            model.params(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{:?}: {err}", cfg.mode);
    }
}

#[test]
fn calibration_term_reaches_every_layer() {
    let spec = ModelSpec {
        input_dim: 4,
        hidden: vec![6, 5],
        classes: 3,
        init_seed: 2,
    };
    let model = init_model(&spec).unwrap();
    let mut rng = seeded(3, 0);
    let x = Tensor::matrix(6, 4, (0..24).map(|_| normal(&mut rng)).collect()).unwrap();
    let labels = [0, 1, 2, 0, 1, 2];
    let groups = build_groups(&x, 4, BetaParams::new(1.0).unwrap(), &mut rng).unwrap();
    let with = |w: f64| {
        let mut g = rankcal_core::numerics::Graph::new();
        let vars: Vec<_> = model.params().iter().map(|p| g.param(p.clone())).collect();
        let cfg = LossConfig {
            mode: LossMode::MNdcg,
            w,
            m: 2.0,
        };
        let loss = batch_objective(&mut g, &vars, &x, &labels, &groups, &cfg).unwrap();
        g.backward(loss).unwrap();
        vars.iter()
            .map(|&v| g.grad(v).unwrap().to_vec())
            .collect::<Vec<_>>()
    };
    let (plain, weighted) = (with(0.0), with(1.0));
    for (layer, (a, b)) in plain.iter().zip(&weighted).enumerate() {
        assert!(
            a.iter().zip(b).any(|(x, y)| x != y),
            "parameter {layer} sees no calibration gradient"
        );
    }
}

/// Straight-line reference for one-hidden-layer ReLU networks trained with
/// cross-entropy and SGD with momentum.
struct Reference {
    w0: Vec<f64>,
    b0: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    v: [Vec<f64>; 4],
    d: usize,
    h: usize,
    k: usize,
}

#[allow(clippy::needless_range_loop)]
impl Reference {
    fn step(&mut self, ds: &LabeledDataset, batch: &[usize], lr: f64, mu: f64) {
        let (d, h, k) = (self.d, self.h, self.k);
        let n = batch.len() as f64;
        let mut g = [
            vec![0.0; d * h],
            vec![0.0; h],
            vec![0.0; h * k],
            vec![0.0; k],
        ];
        for &s in batch {
            let x = ds.row(s);
            let mut pre = self.b0.clone();
            for j in 0..h {
                for i in 0..d {
                    pre[j] += x[i] * self.w0[i * h + j];
                }
            }
            let act: Vec<f64> = pre.iter().map(|&p| if p > 0.0 { p } else { 0.0 }).collect();
            let mut z = self.b1.clone();
            for c in 0..k {
                for j in 0..h {
                    z[c] += act[j] * self.w1[j * k + c];
                }
            }
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let total: f64 = e.iter().sum();
            let dz: Vec<f64> = (0..k)
                .map(|c| (e[c] / total - if c == ds.labels()[s] { 1.0 } else { 0.0 }) / n)
                .collect();
            for j in 0..h {
                for c in 0..k {
                    g[2][j * k + c] += act[j] * dz[c];
                }
            }
            for c in 0..k {
                g[3][c] += dz[c];
            }
            for j in 0..h {
                if pre[j] <= 0.0 {
                    continue;
                }
                let dh: f64 = (0..k).map(|c| dz[c] * self.w1[j * k + c]).sum();
                for i in 0..d {
                    g[0][i * h + j] += x[i] * dh;
                }
                g[1][j] += dh;
            }
        }
        let params = [&mut self.w0, &mut self.b0, &mut self.w1, &mut self.b1];
        for ((p, gp), v) in params.into_iter().zip(&g).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                v[i] = mu * v[i] + gp[i];
                p[i] -= lr * v[i];
            }
        }
    }
}

#[test]
fn cross_entropy_training_matches_reference_loop() {
    let train = random_dataset(22, 3, 3, 1);
    let val = random_dataset(6, 3, 3, 2).with_split(SplitTag::Val);
    let spec = tiny_spec(7);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 0.05,
        momentum: 0.9,
        decay_epochs: vec![1],
        decay_factor: 0.5,
        loss: LossConfig {
            mode: LossMode::CeOnly,
            w: 0.1,
            m: 2.0,
        },
        q: 4,
        alpha: 2.0,
        seed: 9,
    };
    let ckpt = fit(&train, &val, &spec, &cfg).unwrap();

    let init = init_model(&spec).unwrap();
    let p = init.params();
    let mut reference = Reference {
        w0: p[0].data().to_vec(),
        b0: p[1].data().to_vec(),
        w1: p[2].data().to_vec(),
        b1: p[3].data().to_vec(),
        v: [vec![0.0; 15], vec![0.0; 5], vec![0.0; 15], vec![0.0; 3]],
        d: 3,
        h: 5,
        k: 3,
    };
    let mut rng = seeded(cfg.seed, stream::SHUFFLE);
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= 1 { 0.025 } else { 0.05 };
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            reference.step(&train, &batch, lr, cfg.momentum);
        }
    }
    let trained = ckpt.model.params();
    for (got, want) in
        trained
            .iter()
            .zip([&reference.w0, &reference.b0, &reference.w1, &reference.b1])
    {
        for (a, b) in got.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

fn small_config(mode: LossMode, w: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        decay_epochs: vec![2],
        loss: LossConfig { mode, w, m: 1.0 },
        q: 3,
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_weight_reduces_to_cross_entropy() {
    let train = random_dataset(50, 3, 3, 4);
    let val = random_dataset(9, 3, 3, 5);
    let spec = tiny_spec(1);
    let ce = fit(&train, &val, &spec, &small_config(LossMode::CeOnly, 0.1, 3)).unwrap();
    for mode in [LossMode::Mrl, LossMode::MNdcg] {
        let other = fit(&train, &val, &spec, &small_config(mode, 0.0, 3)).unwrap();
        assert_eq!(other.model, ce.model, "{mode}");
        assert_eq!(other.train_losses, ce.train_losses);
    }
}

#[test]
fn training_is_deterministic() {
    let train = random_dataset(40, 3, 3, 6);
    let val = random_dataset(9, 3, 3, 7);
    let cfg = small_config(LossMode::MNdcg, 0.1, 8);
    let a = fit(&train, &val, &tiny_spec(2), &cfg).unwrap();
    let b = fit(&train, &val, &tiny_spec(2), &cfg).unwrap();
    assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
    let c = fit(
        &train,
        &val,
        &tiny_spec(2),
        &small_config(LossMode::MNdcg, 0.1, 9),
    )
    .unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn nan_aborts_with_context() {
    let mut train = random_dataset(20, 3, 3, 6);
    let val = random_dataset(9, 3, 3, 7);
    let mut features = train.features().to_vec();
    features[4] = 1e300;
    train = LabeledDataset::new(features, 3, train.labels().to_vec(), 3, SplitTag::Train).unwrap();
    let cfg = TrainConfig {
        lr: 1e10,
        ..small_config(LossMode::CeOnly, 0.1, 1)
    };
    let err = fit(&train, &val, &tiny_spec(2), &cfg)
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("epoch ") && err.contains("batch ") && err.contains("non-finite"),
        "{err}"
    );
}

#[test]
fn checkpoint_and_logits_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = random_dataset(30, 3, 3, 1);
    let val = random_dataset(12, 3, 3, 2);
    let ckpt = fit(
        &train,
        &val,
        &tiny_spec(4),
        &small_config(LossMode::Mrl, 0.1, 5),
    )
    .unwrap();
    let path = dir.path().join("ckpt.txt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let logits_path = dir.path().join("val_logits.csv");
    train::dump_logits(&ckpt, &val, &logits_path).unwrap();
    let first = std::fs::read(&logits_path).unwrap();
    train::dump_logits(&ckpt, &val, &logits_path).unwrap();
    assert_eq!(std::fs::read(&logits_path).unwrap(), first);

    let (logits, labels) = train::read_logits(&logits_path).unwrap();
    assert_eq!(labels, val.labels());
    assert_eq!(logits.rows(), val.len());
    let in_memory = ckpt.model.logits(&val.features_tensor()).unwrap();
    assert_eq!(logits, in_memory);
    let from_file = predict(&apply_temperature(&logits, 1.0).unwrap(), &labels).unwrap();
    let direct = predict(&apply_temperature(&in_memory, 1.0).unwrap(), val.labels()).unwrap();
    assert_eq!(from_file.accuracy(), direct.accuracy());
}

#[test]
fn he_init_std_for_wide_layer() {
    let spec = ModelSpec {
        input_dim: 100,
        hidden: vec![50],
        classes: 2,
        init_seed: 99,
    };
    let w = init_model(&spec).unwrap().params()[0].data().to_vec();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    let target = 0.02f64.sqrt();
    assert!((std / target - 1.0).abs() < 0.1, "{std}");
}

#[test]
fn batches_never_hold_a_single_sample() {
    let mut rng = seeded(1, 0);
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let b = rng.random_range(2..20);
        let batches = epoch_batches(n, b, &mut rng);
        assert!(batches.iter().all(|batch| batch.len() >= 2), "{n} {b}");
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), n);
    }
}
