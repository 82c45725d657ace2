//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape once in reverse. Graphs are
//! meant to be built per evaluation and thrown away.
//!
//! Tensors are row-major. Most operations work on 2-D `[rows, cols]` tensors
//! where rows are independent evaluation points (batch samples, quadrature
//! nodes) and columns are features. Shape mismatches are programming errors
//! and panic.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "bad reshape to {shape:?}");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `a * b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_nt inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `a^T * b` for `a: [k, m]`, `b: [k, n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_tn inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Abs(Var),
    Atan2(Var, Var),
    Hypot(Var, Var),
    Sum(Var),
    SquaredNorm(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BlockMatMul(Var, Var),
    BatchMatVec(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the seed.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        if cfg!(feature = "nan-check") {
            assert!(value.all_finite(), "non-finite value produced by {op:?}");
        }
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x);
        let ng = self.ng(a);
        self.push(Op::Scale(a, alpha), v, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(Op::AddScalar(a), v, ng)
    }

    /// Matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    /// `a * b^T` for `[m, k] x [n, k]`; the layout of a dense layer's weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMulNt(a, b), v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        let ng = self.ng(a);
        self.push(Op::Sin(a), v, ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        let ng = self.ng(a);
        self.push(Op::Cos(a), v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(Op::Abs(a), v, ng)
    }

    /// Elementwise `atan2(y, x)`. `atan2(0, 0)` is 0 with zero gradient.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let v = self.value(y).zip_map(self.value(x), atan2_safe);
        let ng = self.ng(y) || self.ng(x);
        self.push(Op::Atan2(y, x), v, ng)
    }

    /// Elementwise `sqrt(x^2 + y^2)`; the gradient at the origin is 0.
    pub fn hypot(&mut self, x: Var, y: Var) -> Var {
        let v = self.value(x).zip_map(self.value(y), f64::hypot);
        let ng = self.ng(x) || self.ng(y);
        self.push(Op::Hypot(x, y), v, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).squared_norm());
        let ng = self.ng(a);
        self.push(Op::SquaredNorm(a), v, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(Op::Reshape(a), v, ng)
    }

    /// Concatenation of matrices with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(t.row(r));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(rows, total, out), ng)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(start < end && end <= cols, "bad column slice {start}..{end} of {cols}");
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(Op::Slice(a, start), Tensor::matrix(rows, w, out), ng)
    }

    /// `a[r, c] + row[c]`, broadcasting a length-`cols` vector over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.value(a);
        let rv = self.value(row);
        let cols = t.cols();
        assert_eq!(rv.len(), cols, "add_row width mismatch");
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), v, ng)
    }

    /// `a[r, c] * row[c]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let t = self.value(a);
        let rv = self.value(row);
        let cols = t.cols();
        assert_eq!(rv.len(), cols, "mul_row width mismatch");
        let mut out = t.data().to_vec();
        for chunk in out.chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::MulRow(a, row), v, ng)
    }

    /// Applies `a: [k, q]` to each consecutive block of `q` rows of
    /// `x: [blocks * q, s]`, giving `[blocks * k, s]`.
    pub fn block_matmul(&mut self, a: Var, x: Var) -> Var {
        let v = block_matmul_value(self.value(a), self.value(x));
        let ng = self.ng(a) || self.ng(x);
        self.push(Op::BlockMatMul(a, x), v, ng)
    }

    /// Row-wise matrix-vector product: `m: [n, r * c]` holds one row-major
    /// `r x c` matrix per row, `v: [n, c]`; the result is `[n, r]`.
    pub fn batch_matvec(&mut self, m: Var, v: Var) -> Var {
        let mt = self.value(m);
        let vt = self.value(v);
        let (n, c) = (vt.rows(), vt.cols());
        assert_eq!(mt.rows(), n, "batch_matvec row mismatch");
        assert_eq!(mt.cols() % c, 0, "batch_matvec width mismatch");
        let r = mt.cols() / c;
        let mut out = vec![0.0; n * r];
        for i in 0..n {
            let mrow = mt.row(i);
            let vrow = vt.row(i);
            for a in 0..r {
                out[i * r + a] = (0..c).map(|b| mrow[a * c + b] * vrow[b]).sum();
            }
        }
        let ng = self.ng(m) || self.ng(v);
        self.push(Op::BatchMatVec(m, v), Tensor::matrix(n, r, out), ng)
    }

    /// Gradients of the scalar node `seed` with respect to every node.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let sv = self.value(seed);
        if sv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                sv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[seed.0] = Some(Tensor::new(sv.shape().to_vec(), vec![1.0]));

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Scale(a, alpha) => acc(*a, g.map(|x| alpha * x)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(bv));
                }
                if self.ng(*b) {
                    acc(*b, av.matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = A B^T: dA = G B, dB = G^T A
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.matmul(bv));
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(av));
                }
            }
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Sin(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * y.cos())),
            Op::Cos(a) => acc(*a, g.zip_map(self.value(*a), |x, y| -x * y.sin())),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * sign0(y))),
            Op::Atan2(y, x) => {
                let (yv, xv) = (self.value(*y), self.value(*x));
                let r2 = yv.zip_map(xv, |a, b| a * a + b * b);
                if self.ng(*y) {
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        (0..g.len())
                            .map(|i| safe_div(g.data[i] * xv.data[i], r2.data[i]))
                            .collect(),
                    );
                    acc(*y, d);
                }
                if self.ng(*x) {
                    let d = Tensor::new(
                        g.shape().to_vec(),
                        (0..g.len())
                            .map(|i| safe_div(-g.data[i] * yv.data[i], r2.data[i]))
                            .collect(),
                    );
                    acc(*x, d);
                }
            }
            Op::Hypot(x, y) => {
                let r = &node.value;
                for input in [*x, *y] {
                    if self.ng(input) {
                        let iv = self.value(input);
                        let d = Tensor::new(
                            g.shape().to_vec(),
                            (0..g.len()).map(|i| safe_div(g.data[i] * iv.data[i], r.data[i])).collect(),
                        );
                        acc(input, d);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::filled(self.value(*a).shape().to_vec(), s));
            }
            Op::SquaredNorm(a) => {
                let s = g.item();
                acc(*a, self.value(*a).map(|x| 2.0 * s * x));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshaped(self.value(*a).shape().to_vec())),
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::matrix(rows, w, d));
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let src = self.value(*a);
                let (rows, cols) = (src.rows(), src.cols());
                let w = g.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                acc(*a, Tensor::matrix(rows, cols, d));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let cols = g.cols();
                    let mut d = vec![0.0; cols];
                    for chunk in g.data.chunks(cols) {
                        for (o, x) in d.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                    acc(*row, Tensor::new(self.value(*row).shape().to_vec(), d));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                let cols = g.cols();
                if self.ng(*a) {
                    let mut d = g.data.clone();
                    for chunk in d.chunks_mut(cols) {
                        for (o, b) in chunk.iter_mut().zip(rv.data()) {
                            *o *= b;
                        }
                    }
                    acc(*a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*row) {
                    let av = self.value(*a);
                    let mut d = vec![0.0; cols];
                    for (gc, ac) in g.data.chunks(cols).zip(av.data.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += gc[c] * ac[c];
                        }
                    }
                    acc(*row, Tensor::new(rv.shape().to_vec(), d));
                }
            }
            Op::BlockMatMul(a, x) => {
                let (av, xv) = (self.value(*a), self.value(*x));
                let (k, q) = (av.rows(), av.cols());
                let s = xv.cols();
                let blocks = xv.rows() / q;
                if self.ng(*x) {
                    acc(*x, block_matmul_value(&av.transpose(), g));
                }
                if self.ng(*a) {
                    let mut d = Tensor::zeros(vec![k, q]);
                    for b in 0..blocks {
                        let gb = Tensor::matrix(k, s, g.data[b * k * s..(b + 1) * k * s].to_vec());
                        let xb = Tensor::matrix(q, s, xv.data[b * q * s..(b + 1) * q * s].to_vec());
                        d.add_scaled(&gb.matmul_nt(&xb), 1.0);
                    }
                    acc(*a, d);
                }
            }
            Op::BatchMatVec(m, v) => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let (n, c) = (vv.rows(), vv.cols());
                let r = g.cols();
                if self.ng(*m) {
                    let mut d = vec![0.0; n * r * c];
                    for i in 0..n {
                        for a in 0..r {
                            let ga = g.data[i * r + a];
                            for b in 0..c {
                                d[i * r * c + a * c + b] = ga * vv.data[i * c + b];
                            }
                        }
                    }
                    acc(*m, Tensor::matrix(n, r * c, d));
                }
                if self.ng(*v) {
                    let mut d = vec![0.0; n * c];
                    for i in 0..n {
                        for a in 0..r {
                            let ga = g.data[i * r + a];
                            for b in 0..c {
                                d[i * c + b] += ga * mv.data[i * r * c + a * c + b];
                            }
                        }
                    }
                    acc(*v, Tensor::matrix(n, c, d));
                }
            }
        }
    }
}

fn block_matmul_value(a: &Tensor, x: &Tensor) -> Tensor {
    let (k, q) = (a.rows(), a.cols());
    let (rows, s) = (x.rows(), x.cols());
    assert_eq!(rows % q, 0, "block_matmul: {rows} rows not a multiple of block size {q}");
    let blocks = rows / q;
    let mut out = vec![0.0; blocks * k * s];
    for b in 0..blocks {
        for i in 0..k {
            let orow = &mut out[(b * k + i) * s..(b * k + i + 1) * s];
            for j in 0..q {
                let aij = a.data[i * q + j];
                if aij == 0.0 {
                    continue;
                }
                let xrow = &x.data[(b * q + j) * s..(b * q + j + 1) * s];
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += aij * xv;
                }
            }
        }
    }
    Tensor::matrix(blocks * k, s, out)
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `atan2` with `atan2(0, 0) = 0` for both signed zeros.
pub fn atan2_safe(y: f64, x: f64) -> f64 {
    if y == 0.0 && x == 0.0 {
        0.0
    } else {
        // +0.0 folds a negative zero onto the upper branch
        (y + 0.0).atan2(x)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        r = PI;
    }
    r
}

/// Worst componentwise relative error between reverse-mode gradients and
/// central differences of `f` at `point`.
///
/// Components whose absolute difference is at most `1e-8` count as exact.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x);
    let analytic = g
        .backward(y)
        .expect("gradient_check needs a scalar function")
        .get(x);

    let eval = |p: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x);
        g.value(y).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let diff = (a - fd).abs();
        if diff <= 1e-8 {
            continue;
        }
        worst = worst.max(diff / a.abs().max(fd.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn scalar_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
        assert_eq!(g.backward(y).unwrap().get(x).item(), 1.0);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = g.squared_norm(x);
        assert_eq!(g.value(y).item(), 25.0);
        assert_eq!(g.backward(y).unwrap().get(x).data(), &[6.0, 8.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);
    }

    #[test]
    fn atan2_values_and_degenerate_origin() {
        let mut g = Graph::new();
        let y = g.leaf(Tensor::scalar(1.0));
        let x = g.leaf(Tensor::scalar(1.0));
        let a = g.atan2(y, x);
        assert_abs_diff_eq!(g.value(a).item(), PI / 4.0, epsilon = 1e-15);
        let gr = g.backward(a).unwrap();
        assert_abs_diff_eq!(gr.get(y).item(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(gr.get(x).item(), -0.5, epsilon = 1e-15);

        let mut g = Graph::new();
        let y = g.leaf(Tensor::scalar(0.0));
        let x = g.leaf(Tensor::scalar(0.0));
        let a = g.atan2(y, x);
        assert_eq!(g.value(a).item(), 0.0);
        let gr = g.backward(a).unwrap();
        assert_eq!(gr.get(y).item(), 0.0);
        assert_eq!(gr.get(x).item(), 0.0);
        assert_eq!(atan2_safe(-0.0, -0.0), 0.0);
    }

    #[test]
    fn abs_and_hypot_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, -2.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, -1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.leaf(Tensor::scalar(0.0));
        let d = g.hypot(x, y);
        let gr = g.backward(d).unwrap();
        assert_eq!((gr.get(x).item(), gr.get(y).item()), (0.0, 0.0));
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]));
        let y = g.squared_norm(x);
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(unused), Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = random(&mut rng, vec![5, 3]);
        let b1 = random(&mut rng, vec![5]);
        let w2 = random(&mut rng, vec![2, 5]);
        let input = random(&mut rng, vec![4, 3]);
        // Differentiate with respect to W1 through the whole network.
        let err = gradient_check(
            |g, w| {
                let x = g.constant(input.clone());
                let b = g.constant(b1.clone());
                let v2 = g.constant(w2.clone());
                let z = g.matmul_nt(x, w);
                let z = g.add_row(z, b);
                let h = g.tanh(z);
                let o = g.matmul_nt(h, v2);
                g.squared_norm(o)
            },
            &w1,
            1e-6,
        );
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn gradient_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(&mut rng, vec![6]);
        assert!(gradient_check(|g, x| g.squared_norm(x), &p, 1e-6) < 1e-7);
        let err = gradient_check(
            |g, x| {
                let a = g.tanh(x);
                let b = g.scale(a, 1.7);
                let c = g.tanh(b);
                g.sum(c)
            },
            &p,
            1e-6,
        );
        assert!(err < 1e-5);
        assert_eq!(
            gradient_check(
                |g, _x| {
                    let c = g.constant(Tensor::scalar(4.0));
                    g.sum(c)
                },
                &p,
                1e-6
            ),
            0.0
        );
    }

    /// Every primitive against central differences at 50 seeded points.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..50 {
            let a = random(&mut rng, vec![3, 4]);
            let b = random(&mut rng, vec![3, 4]);
            let m = random(&mut rng, vec![4, 2]);
            let row = random(&mut rng, vec![4]);
            let blk = random(&mut rng, vec![2, 3]);
            let mats = random(&mut rng, vec![3, 8]);
            let vecs = random(&mut rng, vec![3, 2]);
            let checks: Vec<(&str, f64)> = vec![
                ("add", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.add(x, c); g.squared_norm(y) }, &a, 1e-6)),
                ("sub", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.sub(c, x); g.squared_norm(y) }, &a, 1e-6)),
                ("mul", gradient_check(|g, x| { let y = g.mul(x, x); g.sum(y) }, &a, 1e-6)),
                ("scale", gradient_check(|g, x| { let y = g.scale(x, -2.5); g.squared_norm(y) }, &a, 1e-6)),
                ("add_scalar", gradient_check(|g, x| { let y = g.add_scalar(x, 0.3); g.squared_norm(y) }, &a, 1e-6)),
                ("matmul", gradient_check(|g, x| { let c = g.constant(m.clone()); let y = g.matmul(x, c); g.squared_norm(y) }, &a, 1e-6)),
                ("matmul_rhs", gradient_check(|g, x| { let c = g.constant(a.clone()); let y = g.matmul(c, x); g.squared_norm(y) }, &m, 1e-6)),
                ("matmul_nt", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.matmul_nt(x, c); g.squared_norm(y) }, &a, 1e-6)),
                ("matmul_nt_rhs", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.matmul_nt(c, x); g.squared_norm(y) }, &a, 1e-6)),
                ("tanh", gradient_check(|g, x| { let y = g.tanh(x); g.squared_norm(y) }, &a, 1e-6)),
                ("sin", gradient_check(|g, x| { let y = g.sin(x); g.sum(y) }, &a, 1e-6)),
                ("cos", gradient_check(|g, x| { let y = g.cos(x); g.sum(y) }, &a, 1e-6)),
                ("exp", gradient_check(|g, x| { let y = g.exp(x); g.sum(y) }, &a, 1e-6)),
                ("abs", gradient_check(|g, x| { let y = g.abs(x); let z = g.mul(y, y); g.sum(z) }, &a, 1e-6)),
                ("atan2_y", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.atan2(x, c); g.squared_norm(y) }, &a, 1e-6)),
                ("atan2_x", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.atan2(c, x); g.sum(y) }, &a, 1e-6)),
                ("hypot", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.hypot(x, c); g.sum(y) }, &a, 1e-6)),
                ("reshape", gradient_check(|g, x| { let y = g.reshape(x, vec![6, 2]); let c = g.constant(m.clone().reshaped(vec![2, 4])); let z = g.matmul(y, c); g.squared_norm(z) }, &a, 1e-6)),
                ("concat", gradient_check(|g, x| { let c = g.constant(b.clone()); let y = g.concat(&[c, x, x]); let w = g.constant(Tensor::filled(vec![12, 1], 0.5)); let y2 = g.mul(y, y); let z = g.matmul(y2, w); g.sum(z) }, &a, 1e-6)),
                ("slice", gradient_check(|g, x| { let y = g.slice(x, 1, 3); let z = g.tanh(y); g.sum(z) }, &a, 1e-6)),
                ("add_row", gradient_check(|g, x| { let c = g.constant(a.clone()); let y = g.add_row(c, x); g.squared_norm(y) }, &row, 1e-6)),
                ("mul_row", gradient_check(|g, x| { let c = g.constant(a.clone()); let y = g.mul_row(c, x); let z = g.tanh(y); g.sum(z) }, &row, 1e-6)),
                ("mul_row_lhs", gradient_check(|g, x| { let r = g.constant(row.clone()); let y = g.mul_row(x, r); g.squared_norm(y) }, &a, 1e-6)),
                ("block_matmul", gradient_check(|g, x| { let c = g.constant(blk.clone()); let y = g.reshape(x, vec![6, 2]); let z = g.block_matmul(c, y); g.squared_norm(z) }, &a, 1e-6)),
                ("block_matmul_a", gradient_check(|g, x| { let c = g.constant(a.clone().reshaped(vec![6, 2])); let z = g.block_matmul(x, c); g.squared_norm(z) }, &blk, 1e-6)),
                ("batch_matvec_m", gradient_check(|g, x| { let c = g.constant(vecs.clone()); let z = g.batch_matvec(x, c); g.squared_norm(z) }, &mats, 1e-6)),
                ("batch_matvec_v", gradient_check(|g, x| { let c = g.constant(mats.clone()); let z = g.batch_matvec(c, x); let t = g.tanh(z); g.sum(t) }, &vecs, 1e-6)),
            ];
            for (name, err) in checks {
                assert!(err < 1e-5, "trial {trial}: {name} relative error {err}");
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-0.5), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(2.0 * PI + 0.1), 0.1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn wrapped_angles_are_in_range_and_congruent(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            let turns = (a - w) / (2.0 * PI);
            prop_assert!((turns - turns.round()).abs() < 1e-9);
        }
    }
}
