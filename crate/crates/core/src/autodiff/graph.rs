use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A scalar function applied to each row of a matrix, with its gradient.
///
/// Used for densities that are cheaper to differentiate by hand than to
/// express as a chain of primitives (kernel density estimates).
pub trait RowScalarFn: Send + Sync {
    /// Returns `(value, d value / d row)` for row `index`.
    fn eval(&self, index: usize, row: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    /// Per-row gradients are saved at forward time.
    RowFn(Var, Vec<f64>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only tape of operations; rebuilt for every step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient or zeros when the node received none.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| {
            let shape = self.shapes[v.0].clone();
            let n = shape.iter().product();
            Tensor::new(shape, vec![0.0; n]).expect("zero gradient")
        })
    }
}

const PAR_GEMM_FLOPS: usize = 1 << 18;

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let block = |row0: usize, rows: usize, c_chunk: &mut [f64]| {
        // SAFETY: the row block of `a` starting at `row0` spans `rows` rows
        // with the caller's strides, `b` spans k x n, and `c_chunk` holds
        // exactly `rows * n` contiguous row-major entries.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(row0 as isize * a_strides.0),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if par::is_parallel() && m * k * n >= PAR_GEMM_FLOPS && m >= 16 {
        let rows_per = (m / 8).max(8);
        par::for_each_chunk_mut(c, rows_per * n, |i, chunk| {
            block(i * rows_per, chunk.len() / n, chunk);
        });
    } else {
        block(0, m, c);
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Leaf whose gradient requirement follows the tensor's flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let t = t.with_requires_grad(false);
        self.push(Op::Leaf, t, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.clear_grad();
        self.push(Op::Leaf, t.with_requires_grad(false), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                expected: vec![n, k],
                got: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulT(a, b), Tensor::matrix(m, n, out), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), Tensor::matrix(n, m, out), rg)
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("zip shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(op, t, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds a `1 x c` row to every row of an `n x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = dims(self.value(a));
        if self.value(row).shape() != [1, c] {
            return Err(Error::Shape {
                op: "add_row",
                expected: vec![1, c],
                got: self.value(row).shape().to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % c])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), Tensor::matrix(n, c, data), rg))
    }

    /// Adds an `n x 1` column to every column of an `n x c` matrix.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, c) = dims(self.value(a));
        if self.value(col).shape() != [n, 1] {
            return Err(Error::Shape {
                op: "add_col",
                expected: vec![n, 1],
                got: self.value(col).shape().to_vec(),
            });
        }
        let k = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + k[i / c.max(1)])
            .collect();
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(Op::AddCol(a, col), Tensor::matrix(n, c, data), rg))
    }

    /// Scales row `i` of an `n x c` matrix by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, c) = dims(self.value(a));
        if self.value(col).shape() != [n, 1] {
            return Err(Error::Shape {
                op: "mul_col",
                expected: vec![n, 1],
                got: self.value(col).shape().to_vec(),
            });
        }
        let k = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * k[i / c.max(1)])
            .collect();
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(Op::MulCol(a, col), Tensor::matrix(n, c, data), rg))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("unary shape");
        let rg = self.rg(a);
        self.push(op, t, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// `n x c -> n x 1` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (n, c) = dims(self.value(a));
        let src = self.value(a).data();
        let data = (0..n).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Op::SumRows(a), Tensor::matrix(n, 1, data), rg)
    }

    /// `n x c -> n x 1` stable log-sum-exp over each row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (n, c) = dims(self.value(a));
        let src = self.value(a).data();
        let data = (0..n)
            .map(|i| logsumexp(&src[i * c..(i + 1) * c]))
            .collect();
        let rg = self.rg(a);
        self.push(Op::LogSumExpRows(a), Tensor::matrix(n, 1, data), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = dims(self.value(a));
        let (n2, cb) = dims(self.value(b));
        if n != n2 {
            return Err(Error::Shape {
                op: "concat_cols",
                expected: vec![n, cb],
                got: vec![n2, cb],
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), Tensor::matrix(n, ca + cb, data), rg))
    }

    /// Row lookup `table[idx[i]]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(table));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for table with {r} rows"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::GatherRows(table, idx.into()),
            Tensor::matrix(idx.len(), c, data),
            rg,
        ))
    }

    /// Applies `f` to every row, producing an `n x 1` column.
    pub fn row_fn(&mut self, a: Var, f: &dyn RowScalarFn) -> Var {
        let (n, c) = dims(self.value(a));
        let src = self.value(a).data();
        let results = par::map_range(n, |i| f.eval(i, &src[i * c..(i + 1) * c]));
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * c);
        for (v, g) in results {
            values.push(v);
            grads.extend_from_slice(&g);
        }
        let rg = self.rg(a);
        self.push(Op::RowFn(a, grads), Tensor::matrix(n, 1, values), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Helper that adds `f(i)` into the gradient buffer of `v`.
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(usize) -> f64| {
            if !self.rg(v) {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        };
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                if self.rg(a) {
                    // dA += G * B^T
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(b).data(),
                        (1, n as isize),
                        buf,
                        1.0,
                    );
                }
                if self.rg(b) {
                    // dB += A^T * G
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(
                        k,
                        m,
                        n,
                        self.value(a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        buf,
                        1.0,
                    );
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).rows();
                if self.rg(a) {
                    // dA += G * B
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(b).data(),
                        (k as isize, 1),
                        buf,
                        1.0,
                    );
                }
                if self.rg(b) {
                    // dB += G^T * A
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; n * k]);
                    gemm(
                        n,
                        m,
                        k,
                        g,
                        (1, n as isize),
                        self.value(a).data(),
                        (k as isize, 1),
                        buf,
                        1.0,
                    );
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(a));
                add_into(grads, a, &|i| {
                    let (r, c) = (i / n, i % n);
                    g[c * m + r]
                });
            }
            Op::Add(a, b) => {
                add_into(grads, a, &|i| g[i]);
                add_into(grads, b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                add_into(grads, a, &|i| g[i]);
                add_into(grads, b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                add_into(grads, a, &|i| g[i] * vb[i]);
                add_into(grads, b, &|i| g[i] * va[i]);
            }
            Op::AddRow(a, row) => {
                add_into(grads, a, &|i| g[i]);
                if self.rg(row) {
                    let c = self.value(row).numel();
                    let n = g.len() / c.max(1);
                    let mut sums = vec![0.0; c];
                    for r in 0..n {
                        for (j, s) in sums.iter_mut().enumerate() {
                            *s += g[r * c + j];
                        }
                    }
                    add_into(grads, row, &|j| sums[j]);
                }
            }
            Op::AddCol(a, col) => {
                add_into(grads, a, &|i| g[i]);
                if self.rg(col) {
                    let n = self.value(col).numel();
                    let c = g.len() / n.max(1);
                    add_into(grads, col, &|r| g[r * c..(r + 1) * c].iter().sum());
                }
            }
            Op::MulCol(a, col) => {
                let n = self.value(col).numel();
                let c = g.len() / n.max(1);
                let k = self.value(col).data();
                let va = self.value(a).data();
                add_into(grads, a, &|i| g[i] * k[i / c.max(1)]);
                add_into(grads, col, &|r| {
                    (0..c).map(|j| g[r * c + j] * va[r * c + j]).sum()
                });
            }
            Op::Scale(a, s) => add_into(grads, a, &|i| g[i] * s),
            Op::AddScalar(a) => add_into(grads, a, &|i| g[i]),
            Op::Relu(a) => {
                let va = self.value(a).data();
                add_into(grads, a, &|i| if va[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Tanh(a) => {
                let y = out.data();
                add_into(grads, a, &|i| g[i] * (1.0 - y[i] * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                add_into(grads, a, &|i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Softplus(a) => {
                let va = self.value(a).data();
                add_into(grads, a, &|i| g[i] * sigmoid(va[i]));
            }
            Op::Exp(a) => {
                let y = out.data();
                add_into(grads, a, &|i| g[i] * y[i]);
            }
            Op::Log(a) => {
                let va = self.value(a).data();
                add_into(grads, a, &|i| g[i] / va[i]);
            }
            Op::Square(a) => {
                let va = self.value(a).data();
                add_into(grads, a, &|i| 2.0 * g[i] * va[i]);
            }
            Op::Sum(a) => add_into(grads, a, &|_| g[0]),
            Op::Mean(a) => {
                let n = self.value(a).numel().max(1) as f64;
                add_into(grads, a, &|_| g[0] / n);
            }
            Op::SumRows(a) => {
                let c = self.value(a).cols().max(1);
                add_into(grads, a, &|i| g[i / c]);
            }
            Op::LogSumExpRows(a) => {
                let c = self.value(a).cols().max(1);
                let va = self.value(a).data();
                let y = out.data();
                add_into(grads, a, &|i| g[i / c] * (va[i] - y[i / c]).exp());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let w = ca + cb;
                add_into(grads, a, &|i| g[(i / ca.max(1)) * w + i % ca.max(1)]);
                add_into(grads, b, &|i| g[(i / cb.max(1)) * w + ca + i % cb.max(1)]);
            }
            Op::GatherRows(table, ref idx) => {
                if self.rg(table) {
                    let c = self.value(table).cols();
                    let n = self.value(table).numel();
                    let buf = grads[table.0].get_or_insert_with(|| vec![0.0; n]);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::RowFn(a, ref row_grads) => {
                let c = self.value(a).cols().max(1);
                add_into(grads, a, &|i| g[i / c] * row_grads[i]);
            }
        }
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
