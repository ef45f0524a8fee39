use super::{gemm, gemm_strided, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaxOverClasses {
        input: Var,
        argmax: Vec<usize>,
    },
    Gather {
        input: Var,
        cols: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    DivConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SliceRows {
        input: Var,
        start: usize,
        len: usize,
    },
    StackCols(Vec<Var>),
    PermuteRows {
        input: Var,
        perms: Vec<usize>,
    },
    WeightedRowSum {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Summary of one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose local gradient rule was applied.
    pub visited: usize,
    /// Nodes recorded in the graph.
    pub recorded: usize,
}

/// Dynamic computation graph.
///
/// Every operation appends a node whose inputs already exist, so node
/// indices are a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward sweep, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, input: Var, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let needs = self.needs(input);
        let t = Tensor::new(shape, data).expect("shape computed from input");
        self.push(t, op, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = gemm(m, k, n, self.data(a), self.data(b));
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::MatMul(a, b), needs))
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_row",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data: Vec<f64> = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::AddRow(a, bias), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.unary(x, self.shape(x).to_vec(), data, Op::Relu(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let k = self.class_axis("softmax", z, 2)?;
        let mut data = self.data(z).to_vec();
        for row in data.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.unary(z, self.shape(z).to_vec(), data, Op::Softmax(z)))
    }

    /// Row-wise `z − logsumexp(z)`.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let k = self.class_axis("log_softmax", z, 2)?;
        let mut data = self.data(z).to_vec();
        for row in data.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v = *v - max - lse;
            }
        }
        Ok(self.unary(z, self.shape(z).to_vec(), data, Op::LogSoftmax(z)))
    }

    fn class_axis(&self, op: &'static str, v: Var, min: usize) -> Result<usize> {
        let shape = self.shape(v);
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::contract(format!(
                "{op} expects rank 1 or 2, got {shape:?}"
            )));
        }
        let k = *shape.last().unwrap();
        if k < min {
            return Err(Error::contract(format!(
                "{op} needs at least {min} classes, got {k}"
            )));
        }
        Ok(k)
    }

    /// Per-row maximum. The gradient goes to the lowest maximal index.
    pub fn max_over_classes(&mut self, p: Var) -> Result<Var> {
        let k = self.class_axis("max_over_classes", p, 1)?;
        let mut values = Vec::new();
        let mut argmax = Vec::new();
        for row in self.data(p).chunks_exact(k) {
            let (j, v) = first_argmax(row);
            argmax.push(j);
            values.push(v);
        }
        let n = values.len();
        Ok(self.unary(p, vec![n], values, Op::MaxOverClasses { input: p, argmax }))
    }

    /// Picks column `cols[i]` from row `i`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let k = self.class_axis("gather", x, 1)?;
        let rows = self.value(x).rows();
        if cols.len() != rows {
            return Err(Error::Shape {
                op: "gather",
                left: self.shape(x).to_vec(),
                right: vec![cols.len()],
            });
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::contract(format!(
                "gather index {c} out of range {k}"
            )));
        }
        let data = self.data(x);
        let values: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| data[i * k + c])
            .collect();
        Ok(self.unary(
            x,
            vec![rows],
            values,
            Op::Gather {
                input: x,
                cols: cols.to_vec(),
            },
        ))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        self.check_const("mul_const", a, &c)?;
        let data = self.data(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        Ok(self.unary(a, self.shape(a).to_vec(), data, Op::MulConst(a, c)))
    }

    /// Elementwise quotient by a constant of the same length.
    pub fn div_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        self.check_const("div_const", a, &c)?;
        let data = self.data(a).iter().zip(&c).map(|(x, y)| x / y).collect();
        Ok(self.unary(a, self.shape(a).to_vec(), data, Op::DivConst(a, c)))
    }

    fn check_const(&self, op: &'static str, a: Var, c: &[f64]) -> Result<()> {
        if self.value(a).numel() != c.len() {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: vec![c.len()],
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.unary(a, self.shape(a).to_vec(), data, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + s).collect();
        self.unary(a, self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.unary(a, Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.unary(a, Vec::new(), vec![s], Op::Mean(a))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::contract("slice_rows on a scalar"))?;
        if len == 0 || start + len > rows {
            return Err(Error::contract(format!(
                "slice {start}..{} out of range {rows}",
                start + len
            )));
        }
        let width: usize = shape[1..].iter().product();
        let data = self.data(x)[start * width..(start + len) * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.unary(
            x,
            out_shape,
            data,
            Op::SliceRows {
                input: x,
                start,
                len,
            },
        ))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| Error::contract("stack_cols of nothing"))?;
        let rows = match *self.shape(first) {
            [r] => r,
            ref s => {
                return Err(Error::contract(format!(
                    "stack_cols expects vectors, got {s:?}"
                )))
            }
        };
        for &c in cols {
            self.same_shape("stack_cols", first, c)?;
        }
        let n = cols.len();
        let mut data = vec![0.0; rows * n];
        for (j, &c) in cols.iter().enumerate() {
            for (i, &v) in self.data(c).iter().enumerate() {
                data[i * n + j] = v;
            }
        }
        let needs = cols.iter().any(|&c| self.needs(c));
        let t = Tensor::matrix(rows, n, data)?;
        Ok(self.push(t, Op::StackCols(cols.to_vec()), needs))
    }

    /// `out[i][j] = x[i][perms[i][j]]`, where `perms` holds one permutation
    /// of `0..cols` per row.
    pub fn permute_rows(&mut self, x: Var, perms: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.matrix_dims("permute_rows", x)?;
        if perms.len() != m || perms.iter().any(|p| !is_permutation(p, n)) {
            return Err(Error::contract(format!(
                "permute_rows needs {m} permutations of 0..{n}"
            )));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for (i, p) in perms.iter().enumerate() {
            data.extend(p.iter().map(|&j| src[i * n + j]));
        }
        let flat = perms.concat();
        Ok(self.unary(
            x,
            vec![m, n],
            data,
            Op::PermuteRows {
                input: x,
                perms: flat,
            },
        ))
    }

    /// `out[i] = Σ_j x[i][j]·w[j]`, accumulated left to right.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let (m, n) = self.matrix_dims("weighted_row_sum", x)?;
        if weights.len() != n {
            return Err(Error::Shape {
                op: "weighted_row_sum",
                left: vec![m, n],
                right: vec![weights.len()],
            });
        }
        let data = self
            .data(x)
            .chunks_exact(n)
            .map(|row| weighted_sum(row, &weights))
            .collect();
        Ok(self.unary(x, vec![m], data, Op::WeightedRowSum { input: x, weights }))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate across every path to a node. A second call
    /// without [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this graph; call zero_grad first",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                node.value.set_grad(g);
            }
        }
        self.backward_done = true;
        Ok(BackwardStats {
            visited,
            recorded: self.nodes.len(),
        })
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let &[m, k] = self.shape(*a) else {
                    unreachable!("matmul operands are matrices")
                };
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, up, (n, 1), self.data(*b), (1, n), &mut da);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, self.data(*a), (1, k), up, (n, 1), &mut db);
                    acc(*b, db);
                }
            }
            Op::AddRow(a, bias) => {
                let n = self.shape(*bias)[0];
                acc(*a, up.to_vec());
                let mut db = vec![0.0; n];
                for row in up.chunks_exact(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(*bias, db);
            }
            Op::Relu(x) => {
                let dx = self
                    .data(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Softmax(z) => {
                let k = *self.shape(*z).last().unwrap();
                let mut dz = Vec::with_capacity(out.len());
                for (y, g) in out.chunks_exact(k).zip(up.chunks_exact(k)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    dz.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)));
                }
                acc(*z, dz);
            }
            Op::LogSoftmax(z) => {
                let k = *self.shape(*z).last().unwrap();
                let mut dz = Vec::with_capacity(out.len());
                for (y, g) in out.chunks_exact(k).zip(up.chunks_exact(k)) {
                    let total: f64 = g.iter().sum();
                    dz.extend(y.iter().zip(g).map(|(yi, gi)| gi - yi.exp() * total));
                }
                acc(*z, dz);
            }
            Op::MaxOverClasses { input, argmax } => {
                let k = *self.shape(*input).last().unwrap();
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (i, (&j, &g)) in argmax.iter().zip(up).enumerate() {
                    dx[i * k + j] = g;
                }
                acc(*input, dx);
            }
            Op::Gather { input, cols } => {
                let k = *self.shape(*input).last().unwrap();
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (i, (&j, &g)) in cols.iter().zip(up).enumerate() {
                    dx[i * k + j] = g;
                }
                acc(*input, dx);
            }
            Op::Add(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let da = up.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                let db = up.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                acc(*a, da);
                acc(*b, db);
            }
            Op::MulConst(a, c) => acc(*a, up.iter().zip(c).map(|(g, y)| g * y).collect()),
            Op::DivConst(a, c) => acc(*a, up.iter().zip(c).map(|(g, y)| g / y).collect()),
            Op::Scale(a, s) => acc(*a, up.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => acc(*a, up.to_vec()),
            Op::Sum(a) => acc(*a, vec![up[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![up[0] / n as f64; n]);
            }
            Op::SliceRows { input, start, len } => {
                let total = self.value(*input).numel();
                let width = up.len() / len;
                let mut dx = vec![0.0; total];
                dx[start * width..(start + len) * width].copy_from_slice(up);
                acc(*input, dx);
            }
            Op::StackCols(cols) => {
                let n = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    acc(c, up.iter().skip(j).step_by(n).copied().collect());
                }
            }
            Op::PermuteRows { input, perms } => {
                let n = self.shape(*input)[1];
                let mut dx = vec![0.0; up.len()];
                for (pos, (&j, &g)) in perms.iter().zip(up).enumerate() {
                    dx[(pos / n) * n + j] += g;
                }
                acc(*input, dx);
            }
            Op::WeightedRowSum { input, weights } => {
                let dx = up
                    .iter()
                    .flat_map(|&g| weights.iter().map(move |w| g * w))
                    .collect();
                acc(*input, dx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        None => *slot = Some(contrib),
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
    }
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index and value of the first maximum.
pub(crate) fn first_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

pub(crate) fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values
        .iter()
        .zip(weights)
        .fold(0.0, |acc, (v, w)| acc + v * w)
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    p.iter()
        .all(|&j| j < n && !std::mem::replace(&mut seen[j], true))
}
