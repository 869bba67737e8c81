//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Node ids grow monotonically, so a node's inputs always sit
//! earlier on the tape and walking it backwards from the loss is a valid
//! reverse topological order.

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    L2Normalize(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    PoolRows(Var, Vec<Vec<usize>>),
    PairwiseAdd(Var, Var),
    ConcatCols(Var, Var),
    Pick(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::L2Normalize(..) => "l2_normalize",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::PoolRows(..) => "pool_rows",
            Op::PairwiseAdd(..) => "pairwise_add",
            Op::ConcatCols(..) => "concat_cols",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not influence the loss through a differentiable path.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient as a flat slice.
    pub fn get_raw(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0)?.as_deref()
    }

    /// Stores the gradient of `var` into `tensor.grad` (zeros when the loss
    /// does not depend on it).
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) {
        let g = self
            .get_raw(var)
            .map_or_else(|| vec![0.0; tensor.len()], <[f64]>::to_vec);
        tensor.set_grad(Some(g));
    }

    /// Tape positions of the operations replayed, in replay order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    out
}

fn norms_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut norms = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let s: f64 = (0..n)
                .map(|k| x[o * n * inner + k * inner + i].powi(2))
                .sum();
            norms[o * inner + i] = s.sqrt();
        }
    }
    norms
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `m×k · k×n` product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => *slot = Some(contribution),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::PairwiseAdd(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::LogSumExp(a, _)
            | Op::L2Normalize(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::PoolRows(a, _)
            | Op::Pick(a, _) => vec![a],
        }
    }

    /// Records a leaf. It takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(NumError::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds the vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.rank2("add_row", a)?;
        if self.shape(b) != [n] {
            return Err(NumError::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(&bias) {
                *x += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, b)))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let v = self.value(a);
        let out = softmax_along(v.data(), v.shape(), axis);
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a, axis)))
    }

    /// `log Σ exp` along `axis`; the axis is removed from the result.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", a, axis)?;
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] =
                    max + (0..n).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
            }
        }
        let shape = reduced_shape(v.shape(), axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp(a, axis)))
    }

    /// Divides each slice along `axis` by its Euclidean norm. Zero slices map
    /// to zero and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", a, axis)?;
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let norms = norms_along(v.data(), v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let norm = norms[o * inner + i];
                if norm == 0.0 {
                    continue;
                }
                for k in 0..n {
                    let at = o * n * inner + k * inner + i;
                    out[at] = x[at] / norm;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize(a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let v = self.value(a);
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x[o * n * inner + k * inner + i];
                }
            }
        }
        let shape = reduced_shape(v.shape(), axis);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2("gather_rows", a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &r in indices {
            if r >= m {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: m,
                });
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![indices.len(), n], out)?;
        Ok(self.push(t, Op::GatherRows(a, indices.to_vec())))
    }

    /// Row `g` of the result is the mean of the rows of `a` listed in
    /// `groups[g]`. Every group must be non-empty.
    pub fn pool_rows(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.rank2("pool_rows", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; groups.len() * n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(NumError::Index {
                    op: "pool_rows",
                    index: g,
                    extent: 0,
                });
            }
            let w = 1.0 / members.len() as f64;
            for &r in members {
                if r >= m {
                    return Err(NumError::Index {
                        op: "pool_rows",
                        index: r,
                        extent: m,
                    });
                }
                for c in 0..n {
                    out[g * n + c] += w * src[r * n + c];
                }
            }
        }
        let t = Tensor::new(vec![groups.len(), n], out)?;
        Ok(self.push(t, Op::PoolRows(a, groups.to_vec())))
    }

    /// For `a` (m×d) and `b` (n×d), row `i·n + j` of the result is
    /// `a_i + b_j`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.rank2("pairwise_add", a)?;
        let (n, d2) = self.rank2("pairwise_add", b)?;
        if d != d2 {
            return Err(NumError::Shape {
                op: "pairwise_add",
                lhs: vec![m, d],
                rhs: vec![n, d2],
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n * d);
        for i in 0..m {
            for j in 0..n {
                out.extend(
                    x[i * d..(i + 1) * d]
                        .iter()
                        .zip(&y[j * d..(j + 1) * d])
                        .map(|(p, q)| p + q),
                );
            }
        }
        Ok(self.push(Tensor::new(vec![m * n, d], out)?, Op::PairwiseAdd(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.rank2("concat_cols", a)?;
        let (m2, q) = self.rank2("concat_cols", b)?;
        if m != m2 {
            return Err(NumError::Shape {
                op: "concat_cols",
                lhs: vec![m, p],
                rhs: vec![m2, q],
            });
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&x[r * p..(r + 1) * p]);
            out.extend_from_slice(&y[r * q..(r + 1) * q]);
        }
        Ok(self.push(Tensor::new(vec![m, p + q], out)?, Op::ConcatCols(a, b)))
    }

    /// Gathers elements by flat (row-major) index into a vector.
    pub fn pick(&mut self, a: Var, flat_indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(flat_indices.len());
        for &i in flat_indices {
            if i >= src.len() {
                return Err(NumError::Index {
                    op: "pick",
                    index: i,
                    extent: src.len(),
                });
            }
            out.push(src[i]);
        }
        Ok(self.push(Tensor::vector(out), Op::Pick(a, flat_indices.to_vec())))
    }

    /// Cosine similarity of two vectors of equal length (0 when either is
    /// zero).
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.shape(u).len() != 1 {
            return Err(NumError::Shape {
                op: "cosine",
                lhs: self.shape(u).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        self.same_shape("cosine", u, v)?;
        let un = self.l2_normalize(u, 0)?;
        let vn = self.l2_normalize(v, 0)?;
        let prod = self.mul(un, vn)?;
        Ok(self.sum(prod))
    }

    /// Pairwise cosine table between the rows of `a` (m×d) and `b` (n×d).
    pub fn cosine_table(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = self.rank2("cosine_table", a)?;
        let (_, d2) = self.rank2("cosine_table", b)?;
        if d != d2 {
            return Err(NumError::Shape {
                op: "cosine_table",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let an = self.l2_normalize(a, 1)?;
        let bn = self.l2_normalize(b, 1)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Row-wise cosine between equally shaped matrices, as a vector.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        self.rank2("row_cosine", a)?;
        let an = self.l2_normalize(a, 1)?;
        let bn = self.l2_normalize(b, 1)?;
        let prod = self.mul(an, bn)?;
        self.sum_axis(prod, 1)
    }

    /// Replays the tape from `loss` back to the leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                send(*a, transpose_raw(g, s[1], s[0]));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(x).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                let n = self.shape(*b)[0];
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(*b, gb);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*a, dx);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = g[at(k)] - out[at(k)].exp() * total;
                        }
                    }
                }
                send(*a, dx);
            }
            Op::LogSumExp(a, axis) => {
                let shape = self.shape(*a);
                let (outer, n, inner) = split_axis(shape, *axis);
                let p = softmax_along(self.value(*a).data(), shape, *axis);
                let mut dx = vec![0.0; p.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            let at = o * n * inner + k * inner + i;
                            dx[at] = g[o * inner + i] * p[at];
                        }
                    }
                }
                send(*a, dx);
            }
            Op::L2Normalize(a, axis) => {
                let shape = self.shape(*a);
                let (outer, n, inner) = split_axis(shape, *axis);
                let norms = norms_along(self.value(*a).data(), shape, *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = (g[at(k)] - out[at(k)] * dot) / norm;
                        }
                    }
                }
                send(*a, dx);
            }
            Op::SumAll(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[o * n * inner + k * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(*a, dx);
            }
            Op::GatherRows(a, indices) => {
                let s = self.shape(*a);
                let n = s[1];
                let mut dx = vec![0.0; s[0] * n];
                for (slot, &r) in indices.iter().enumerate() {
                    for c in 0..n {
                        dx[r * n + c] += g[slot * n + c];
                    }
                }
                send(*a, dx);
            }
            Op::PoolRows(a, groups) => {
                let s = self.shape(*a);
                let n = s[1];
                let mut dx = vec![0.0; s[0] * n];
                for (gi, members) in groups.iter().enumerate() {
                    let w = 1.0 / members.len() as f64;
                    for &r in members {
                        for c in 0..n {
                            dx[r * n + c] += w * g[gi * n + c];
                        }
                    }
                }
                send(*a, dx);
            }
            Op::PairwiseAdd(a, b) => {
                let (m, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let row = &g[(i * n + j) * d..(i * n + j + 1) * d];
                        for c in 0..d {
                            da[i * d + c] += row[c];
                            db[j * d + c] += row[c];
                        }
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let q = self.shape(*b)[1];
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for r in 0..m {
                    let row = &g[r * (p + q)..(r + 1) * (p + q)];
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Pick(a, indices) => {
                let mut dx = vec![0.0; self.value(*a).len()];
                for (slot, &i) in indices.iter().enumerate() {
                    dx[i] += g[slot];
                }
                send(*a, dx);
            }
        }
    }
}
