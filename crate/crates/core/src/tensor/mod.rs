//! Dense row-major matrices with tape-based reverse-mode differentiation.
//!
//! Every value is a 2-D matrix of `f64`; vectors are `1 x n` rows. Operations
//! are recorded on a [`Graph`] in creation order, so the tape is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

mod check;
pub mod nn;

use alloc::vec;
use alloc::vec::Vec;

pub use check::{grad_check, grad_check_coords, GradCheckReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("attention row {0} has every key masked")]
    FullyMaskedRow(usize),
    #[error("index {index} out of range for {len} elements")]
    Index { index: usize, len: usize },
    #[error("backward called on a non-scalar node of shape {0:?}")]
    NonScalarLoss((usize, usize)),
}

pub type Result<T> = core::result::Result<T, TensorError>;

/// A concrete matrix value.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: (1, cols),
                    rhs: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask; `true` means the query row may attend the key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allowed[r * self.cols + c] = v;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    PowAbs(Var, f64),
    Clamp(Var, f64, f64),
    MinConst(Var, Vec<f64>),
    MaxConst(Var, Vec<f64>),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or was created as a constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording tape of matrix operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    stops: Vec<Vec<f64>>,
    replay: Option<Vec<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> TensorError {
    TensorError::Shape { op, lhs, rhs }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose [`Graph::stopped`] reads return `log` in order instead
    /// of live values.
    pub fn replaying(log: Vec<Vec<f64>>) -> Self {
        Self {
            replay: Some(log),
            ..Self::default()
        }
    }

    /// Values read through [`Graph::stopped`] so far.
    pub fn stop_log(&self) -> &[Vec<f64>] {
        &self.stops
    }

    /// Reads the value of `v` for use as a constant. Every read is logged, and
    /// a replaying graph substitutes the logged value at the same position.
    pub fn stopped(&mut self, v: Var) -> Vec<f64> {
        let k = self.stops.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(logged) => logged.clone(),
            None => self.node(v).value.clone(),
        };
        self.stops.push(value.clone());
        value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (a trainable parameter or an input under test).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.rows, t.cols, t.data.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows, t.cols, t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err("constant", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    /// Copies the current value into a new constant leaf (stops gradients).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", (m, k), (n, k2)));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMulBT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let av = &self.node(a).value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(n, m, out, Op::Transpose(a), ng)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, (usize, usize))> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let out = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, sa))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, (m, n)) = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, (m, n)) = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, (m, n)) = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, (m, n)) = self.zip_same("div", a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Div(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(shape_err("add_row", (m, n), self.shape(row)));
        }
        let rv = &self.node(row).value;
        let out = self
            .node(a)
            .value
            .chunks_exact(n.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(m, n, out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(shape_err("mul_row", (m, n), self.shape(row)));
        }
        let rv = &self.node(row).value;
        let out = self
            .node(a)
            .value
            .chunks_exact(n.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| x * y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(m, n, out, Op::MulRow(a, row), ng))
    }

    /// Scales row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if factors.len() != m {
            return Err(shape_err("scale_rows", (m, n), (factors.len(), 1)));
        }
        let mut out = self.node(a).value.clone();
        for (r, &f) in out.chunks_exact_mut(n.max(1)).zip(factors) {
            r.iter_mut().for_each(|x| *x *= f);
        }
        let ng = self.ng(a);
        Ok(self.push(m, n, out, Op::ScaleRows(a, factors.to_vec()), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(m, n, out, Op::Scale(a, c), ng)
    }

    /// Adds a same-shaped constant; the gradient passes through unchanged.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if c.len() != m * n {
            return Err(shape_err("add_const", (m, n), (c.len(), 1)));
        }
        let out = self.node(a).value.iter().zip(c).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a);
        Ok(self.push(m, n, out, Op::AddConst(a), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, n) = self.shape(a);
        let out = self.node(a).value.iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(m, n, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Natural log; callers clamp inputs away from zero first.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), libm::log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `|a|^p` for `p >= 1`.
    pub fn pow_abs(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::PowAbs(a, p), move |x| libm::pow(x.abs(), p))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.clamp(lo, hi))
    }

    pub fn min_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if c.len() != m * n {
            return Err(shape_err("min_const", (m, n), (c.len(), 1)));
        }
        let out = self.node(a).value.iter().zip(c).map(|(&x, &y)| x.min(y)).collect();
        let ng = self.ng(a);
        Ok(self.push(m, n, out, Op::MinConst(a, c.to_vec()), ng))
    }

    pub fn max_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if c.len() != m * n {
            return Err(shape_err("max_const", (m, n), (c.len(), 1)));
        }
        let out = self.node(a).value.iter().zip(c).map(|(&x, &y)| x.max(y)).collect();
        let ng = self.ng(a);
        Ok(self.push(m, n, out, Op::MaxConst(a, c.to_vec()), ng))
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.node(a).value.clone();
        for r in out.chunks_exact_mut(n.max(1)) {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in r.iter_mut() {
                *x = libm::exp(*x - mx);
                s += *x;
            }
            r.iter_mut().for_each(|x| *x /= s);
        }
        let ng = self.ng(a);
        self.push(m, n, out, Op::SoftmaxRows(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (m, n) = self.shape(a);
        let mut out = self.node(a).value.clone();
        let mut inv_std = Vec::with_capacity(m);
        for r in out.chunks_exact_mut(n.max(1)) {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            r.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(m, n, out, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(shape_err("slice_cols", (m, n), (start, len)));
        }
        let av = &self.node(a).value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(m, len, out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(shape_err("slice_rows", (m, n), (start, len)));
        }
        let out = self.node(a).value[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(len, n, out, Op::SliceRows(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut n = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != m {
                return Err(shape_err("concat_cols", (m, n), s));
            }
            n += s.1;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.node(p).value[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.1 != n {
                return Err(shape_err("concat_rows", (m, n), s));
            }
            m += s.0;
            out.extend_from_slice(&self.node(p).value);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Builds a `rows x cols` matrix whose element `t` is `a.flat[index[t]]`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(shape_err("gather", (rows, cols), (index.len(), 1)));
        }
        let av = &self.node(a).value;
        let len = av.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            out.push(*av.get(i).ok_or(TensorError::Index { index: i, len })?);
        }
        let ng = self.ng(a);
        Ok(self.push(rows, cols, out, Op::Gather(a, index), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (m * n).max(1) as f64)
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(TensorError::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = nodes[a.0].cols;
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::MatMulBT(a, b) => {
                let k = nodes[a.0].cols;
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let drow = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let x = g[i * n + j];
                            for (d, &y) in drow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += x * y;
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let x = g[i * n + j];
                            for (d, &y) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => acc(*a, &mut |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] += g[i * n + j];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * bv[t];
                    }
                });
                acc(*b, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * av[t];
                    }
                });
            }
            Op::Div(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] / bv[t];
                    }
                });
                acc(*b, &mut |d| {
                    for t in 0..g.len() {
                        d[t] -= g[t] * av[t] / (bv[t] * bv[t]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for r in g.chunks_exact(n.max(1)) {
                        add_into(d, r);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = &nodes[a.0].value;
                let rv = &nodes[row.0].value;
                acc(*a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * rv[j];
                        }
                    }
                });
                acc(*row, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::ScaleRows(a, f) => acc(*a, &mut |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[i * n + j] * f[i];
                    }
                }
            }),
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c)),
            Op::AddConst(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        if av[t] > 0.0 {
                            d[t] += g[t];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * y[t] * (1.0 - y[t]);
                    }
                });
            }
            Op::Ln(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] / av[t];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * y[t];
                    }
                });
            }
            Op::Abs(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        d[t] += g[t] * signum(av[t]);
                    }
                });
            }
            Op::PowAbs(a, p) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        let x = av[t];
                        if x != 0.0 {
                            d[t] += g[t] * p * libm::pow(x.abs(), p - 1.0) * signum(x);
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        if av[t] > *lo && av[t] < *hi {
                            d[t] += g[t];
                        }
                    }
                });
            }
            Op::MinConst(a, c) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        if av[t] <= c[t] {
                            d[t] += g[t];
                        }
                    }
                });
            }
            Op::MaxConst(a, c) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for t in 0..g.len() {
                        if av[t] >= c[t] {
                            d[t] += g[t];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            d[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gym = dot(gr, yr) / n as f64;
                        for j in 0..n {
                            d[i * n + j] += inv_std[i] * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let an = nodes[a.0].cols;
                acc(*a, &mut |d| {
                    for i in 0..m {
                        add_into(&mut d[i * an + start..i * an + start + n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                acc(*a, &mut |d| add_into(&mut d[start * n..(start + m) * n], g));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].cols;
                    acc(p, &mut |d| {
                        for i in 0..m {
                            add_into(&mut d[i * c..(i + 1) * c], &g[i * n + off..i * n + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Gather(a, index) => acc(*a, &mut |d| {
                for (t, &i) in index.iter().enumerate() {
                    d[i] += g[t];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

fn signum(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, &x) in d.iter_mut().zip(g) {
        *d += x;
    }
}

/// Dot product with eight independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(&t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = t(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]);
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (xi, ii) = (g.constant(&x), g.constant(&id));
        let y = g.matmul(ii, xi).unwrap();
        assert_eq!(g.value(y), &x.data[..]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(2, 3));
        let b = g.constant(&Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.param(&t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let bt = t(&[&[1.0, -1.0, 2.0], &[0.5, 3.0, -2.0]]);
        let b = g.constant(&bt);
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let ga = grads.get(a).unwrap();
        // d/dA sum(AB) = 1 * B^T: row sums of B.
        let rowsum = [2.0, 1.5];
        for i in 0..3 {
            for p in 0..2 {
                assert_eq!(ga[i * 2 + p], rowsum[p]);
            }
        }
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]]));
        let y = g.softmax_rows(x);
        let v = g.value(y).to_vec();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-15);
        for &u in &v[3..] {
            assert!((u - 1.0 / 3.0).abs() < 1e-15);
        }
        let x2 = g.constant(&t(&[&[101.0, 102.0, 103.0], &[-3.0, -3.0, -3.0]]));
        let y2 = g.softmax_rows(x2);
        for (a, b) in v.iter().zip(g.value(y2)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss((2, 2)))));
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::row_vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }
}
