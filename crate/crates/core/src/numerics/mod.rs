//! Dense `f64` tensors and a dynamic reverse-mode autodiff tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! the backward sweep is a single reverse scan.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub(crate) use graph::{first_argmax, softmax_in_place, weighted_sum};
pub use graph::{BackwardStats, Graph, Var};
pub use tensor::Tensor;

/// Row-major matrix product `c = a · b` for `a: m×k`, `b: k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_strided(m, k, n, a, (k, 1), b, (n, 1), &mut c);
    c
}

/// `c += a · b` where `a` and `b` are addressed with explicit (row, col)
/// strides, which lets transposed operands be used without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the
    // slices, and `c` is an exclusively borrowed contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests;
