use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    assert_eq!(Tensor::scalar(4.0).numel(), 1);
}

#[test]
fn matmul_identity_and_basis() {
    let mut g = Graph::new();
    let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(mat(1, 2, &[1.0, 0.0]));
    let b = g.constant(mat(2, 1, &[0.0, 5.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-13, "{x} vs {y}");
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_are_transposed_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 2);
    let err = grad_check_many(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn relu_values_and_tie_rule() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.5, 3.0, 1e-300]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn softmax_uniform_and_shift() {
    let mut g = Graph::new();
    let z = g.constant(mat(1, 3, &[0.0, 0.0, 0.0]));
    let p = g.softmax(z).unwrap();
    for &v in g.value(p).data() {
        assert_eq!(v, 1.0 / 3.0);
    }

    let z = g.constant(mat(2, 2, &[1.5, 2.5, -7.0, -6.0]));
    let p = g.softmax(z).unwrap();
    let d = g.value(p).data();
    assert_eq!(d[0..2], d[2..4]);
}

#[test]
fn softmax_matches_direct_evaluation() {
    // p_k = 1 / Σ_j exp(z_j − z_k), a different algebraic route.
    let z = [1.0, 2.0, 3.0];
    let mut g = Graph::new();
    let v = g.constant(mat(1, 3, &z));
    let p = g.softmax(v).unwrap();
    for (k, &pk) in g.value(p).data().iter().enumerate() {
        let oracle = 1.0 / z.iter().map(|zj| (zj - z[k]).exp()).sum::<f64>();
        assert!((pk - oracle).abs() < 1e-15, "{pk} vs {oracle}");
    }
    // Known values to 12 digits.
    let expected = [0.090030573170380, 0.244728471054798, 0.665240955774822];
    for (a, b) in g.value(p).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn softmax_requires_two_classes() {
    let mut g = Graph::new();
    let z = g.constant(mat(2, 1, &[1.0, 2.0]));
    assert!(g.softmax(z).is_err());
}

#[test]
fn softmax_rows_sum_to_one_for_large_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f64> = (0..50 * 7).map(|_| rng.random_range(-1e3..1e3)).collect();
    let mut g = Graph::new();
    let z = g.constant(Tensor::matrix(50, 7, data).unwrap());
    let p = g.softmax(z).unwrap();
    for row in g.value(p).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalized(row in prop::collection::vec(-1e3f64..1e3, 2..12)) {
        let k = row.len();
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, k, row).unwrap());
        let p = g.softmax(z).unwrap();
        let s: f64 = g.value(p).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_for_exact_shifts(
        row in prop::collection::vec(-64i32..64, 2..8),
        shift in -1000i32..1000,
    ) {
        // Integer-valued logits keep z + c and the max-shift exact.
        let base: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + f64::from(shift)).collect();
        let k = base.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, k, base).unwrap());
        let b = g.constant(Tensor::matrix(1, k, shifted).unwrap());
        let pa = g.softmax(a).unwrap();
        let pb = g.softmax(b).unwrap();
        prop_assert_eq!(g.value(pa).data(), g.value(pb).data());
    }
}

#[test]
fn max_over_classes_and_tie_rule() {
    let mut g = Graph::new();
    let p = g.param(mat(2, 3, &[0.1, 0.7, 0.2, 0.5, 0.5, 0.0]));
    let m = g.max_over_classes(p).unwrap();
    assert_eq!(g.value(m).data(), &[0.7, 0.5]);
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn max_over_classes_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = random_matrix(&mut rng, 40, 6);
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let m = g.max_over_classes(v).unwrap();
    for i in 0..40 {
        let mut best = f64::NEG_INFINITY;
        for j in 0..6 {
            if t.get(i, j) > best {
                best = t.get(i, j);
            }
        }
        assert_eq!(g.value(m).data()[i], best);
    }
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 5.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_repeat() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));

    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    g.zero_grad();
    assert!(g.grad(x).is_none());
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn shared_subexpressions_accumulate() {
    // f(x) = sum(u + u) with u = x*x, versus the same with two copies of x.
    let x0 = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let u = g.mul(x, x).unwrap();
    let w = g.add(u, u).unwrap();
    let s = g.sum(w);
    g.backward(s).unwrap();
    let shared = g.grad(x).unwrap().to_vec();

    let mut g = Graph::new();
    let x1 = g.param(x0.clone());
    let x2 = g.param(x0.clone());
    let x3 = g.param(x0.clone());
    let x4 = g.param(x0.clone());
    let u1 = g.mul(x1, x2).unwrap();
    let u2 = g.mul(x3, x4).unwrap();
    let w = g.add(u1, u2).unwrap();
    let s = g.sum(w);
    g.backward(s).unwrap();
    let summed: Vec<f64> = (0..3)
        .map(|i| {
            [x1, x2, x3, x4]
                .iter()
                .map(|&v| g.grad(v).unwrap()[i])
                .sum()
        })
        .collect();
    assert_eq!(shared, summed);
    assert_eq!(shared, vec![2.0, -6.0, 8.0]);
}

#[test]
fn backward_visits_each_reachable_node_once() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let unused = g.constant(Tensor::scalar(1.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let s = g.sum(z);
    let stats = g.backward(s).unwrap();
    assert_eq!(stats.recorded, 5);
    assert_eq!(stats.visited, 4);
    assert!(g.grad(unused).is_none());
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = Tensor::vector(vec![0.3, -1.0, 7.5]).unwrap();
    let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
    assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let x = Tensor::vector(vec![1.0, 1e308]).unwrap();
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let z = random_matrix(&mut rng, 4, 5);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let err = grad_check(
            |g, v| {
                let lp = g.log_softmax(v)?;
                let picked = g.gather(lp, &labels)?;
                let m = g.mean(picked);
                Ok(g.scale(m, -1.0))
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn composite_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::vector((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let b = Tensor::vector((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let c = Tensor::vector((0..3).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let err = grad_check_many(
        |g, v| {
            let m = g.stack_cols(&[v[0], v[1], v[2]])?;
            let p = g.permute_rows(m, &[vec![2, 0, 1], vec![0, 1, 2], vec![1, 2, 0]])?;
            let w = g.weighted_row_sum(p, vec![1.0, 0.5, 0.25])?;
            let d = g.div_const(w, vec![2.0, 3.0, 4.0])?;
            let s = g.slice_rows(d, 1, 2)?;
            let t = g.mul_const(s, vec![-1.0, 3.0])?;
            let sq = g.mul(t, t)?;
            Ok(g.mean(sq))
        },
        &[a, b, c],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn mlp_style_composite_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_matrix(&mut rng, 5, 3);
    let w = random_matrix(&mut rng, 3, 4);
    let b = Tensor::vector((0..4).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let err = grad_check_many(
        |g, v| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, v[0])?;
            let h = g.add_row(h, v[1])?;
            let h = g.relu(h);
            let p = g.softmax(h)?;
            let m = g.max_over_classes(p)?;
            Ok(g.mean(m))
        },
        &[w, b],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}
