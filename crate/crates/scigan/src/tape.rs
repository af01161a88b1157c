//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every primitive operation of a forward pass as a node
//! holding its result; [`Tape::backward`] replays the record once in reverse,
//! accumulating adjoints, and returns gradients for the parameter leaves.
//! Tapes are built fresh for every training step (define-by-run).
//!
//! Design notes:
//! - Values are whole batches (`batch x features`), so one node usually
//!   covers an entire layer application.
//! - [`Tape::sum_elements`] accumulates per-coordinate in sorted value
//!   order, which makes set pooling bit-for-bit independent of element
//!   order — permutation invariance holds exactly, not just approximately.
//! - [`Tape::detach`] copies a value while blocking gradient flow; the
//!   discriminator update uses it to treat generator outputs as data.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor2};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Row-broadcast add: `lhs (m x c) + bias (1 x c)`.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogClamped(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SumElements(Vec<Var>),
    MeanAll(Var),
    SumAll(Var),
    /// One column of a matrix as a `rows x 1` tensor.
    SliceCol(Var, usize),
    /// Column-broadcast product: `lhs (m x c)` scaled rowwise by `rhs (m x 1)`.
    MulCol(Var, Var),
    Detach,
}

struct Node {
    op: Op,
    value: Tensor2,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter leaves in push order, memoized so repeated use of one
    /// parameter shares a single node (adjoints then accumulate).
    param_vars: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
}

/// Gradients for the parameter leaves of one backward pass.
pub struct ParamGrads {
    grads: HashMap<ParamId, Tensor2>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2> {
        self.grads.get(&id)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A trainable leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.get(id).clone());
        self.param_vars.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dimension(
                "Tape::add_bias",
                format!("input {:?} bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        let value = out;
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dimension(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("Tape::add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("Tape::sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("Tape::mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| factor * x);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(self.value(a));
        self.push(Op::SoftmaxRows(a), value)
    }

    /// `ln(max(x, PROB_FLOOR))`; the gradient is zero where the floor bites.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(PROB_FLOOR).ln());
        self.push(Op::LogClamped(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("Tape::concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dimension(
                    "Tape::concat_cols",
                    format!("row counts differ: {} vs {}", rows, v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                offset += v.cols();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Coordinate-wise sum of same-shaped tensors, accumulated in sorted
    /// value order so the result is independent of input order.
    pub fn sum_elements(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("Tape::sum_elements", "empty set"));
        }
        let shape = self.value(parts[0]).shape();
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(Error::dimension(
                    "Tape::sum_elements",
                    format!("{:?} vs {:?}", shape, self.value(p).shape()),
                ));
            }
        }
        let values: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let out = crate::tensor::sum_sorted(&values);
        Ok(self.push(Op::SumElements(parts.to_vec()), out))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mean = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        let value = Tensor2::from_vec(1, 1, vec![mean]).expect("1x1");
        self.push(Op::MeanAll(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sum = v.as_slice().iter().sum::<f64>();
        let value = Tensor2::from_vec(1, 1, vec![sum]).expect("1x1");
        self.push(Op::SumAll(a), value)
    }

    pub fn slice_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let v = self.value(a);
        if col >= v.cols() {
            return Err(Error::dimension(
                "Tape::slice_col",
                format!("column {col} out of range for {:?}", v.shape()),
            ));
        }
        let mut out = Tensor2::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            out.row_mut(r)[0] = v.get(r, col);
        }
        Ok(self.push(Op::SliceCol(a, col), out))
    }

    /// Multiply every column of `a` elementwise by the single column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::dimension(
                "Tape::mul_col",
                format!("lhs {:?} column {:?}", av.shape(), cv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let factor = cv.get(r, 0);
            for o in out.row_mut(r) {
                *o *= factor;
            }
        }
        Ok(self.push(Op::MulCol(a, c), out))
    }

    /// Copies a value and blocks gradient flow through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::Detach, value)
    }

    /// Scalar convenience accessor.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.shape() != (1, 1) {
            return Err(Error::contract(
                "Tape::scalar",
                format!("expected 1x1, got {:?}", t.shape()),
            ));
        }
        Ok(t.get(0, 0))
    }

    /// Reverse sweep from a scalar loss; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(
                "Tape::backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut adjoints: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor2::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            let grad = match adjoints[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Detach => {
                    if let Op::Leaf = node.op {
                        adjoints[idx] = Some(grad); // keep for parameter extraction
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&grad, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &grad)?;
                    accumulate(&mut adjoints, a.0, da);
                    accumulate(&mut adjoints, b.0, db);
                }
                Op::AddBias(x, bias) => {
                    let mut db = Tensor2::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (o, &g) in db.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut adjoints, x.0, grad);
                    accumulate(&mut adjoints, bias.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adjoints, a.0, grad.clone());
                    accumulate(&mut adjoints, b.0, grad);
                }
                Op::Sub(a, b) => {
                    let neg = grad.map(|g| -g);
                    accumulate(&mut adjoints, a.0, grad);
                    accumulate(&mut adjoints, b.0, neg);
                }
                Op::Mul(a, b) => {
                    let da = grad.zip_map(self.value(*b), |g, y| g * y);
                    let db = grad.zip_map(self.value(*a), |g, x| g * x);
                    accumulate(&mut adjoints, a.0, da);
                    accumulate(&mut adjoints, b.0, db);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut adjoints, a.0, grad.map(|g| factor * g));
                }
                Op::Relu(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::Tanh(a) => {
                    let da = grad.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::Sigmoid(a) => {
                    let da = grad.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = grad.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for ((o, &yi), &gi) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::LogClamped(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| {
                        if x >= PROB_FLOOR {
                            g / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::Square(a) => {
                    let da = grad.zip_map(self.value(*a), |g, x| g * 2.0 * x);
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut dp = Tensor2::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&grad.row(r)[offset..offset + pv.cols()]);
                        }
                        offset += pv.cols();
                        accumulate(&mut adjoints, p.0, dp);
                    }
                }
                Op::SumElements(parts) => {
                    for &p in parts {
                        accumulate(&mut adjoints, p.0, grad.clone());
                    }
                }
                Op::MeanAll(a) => {
                    let v = self.value(*a);
                    let g = grad.get(0, 0) / v.len() as f64;
                    let da = Tensor2::from_vec(v.rows(), v.cols(), vec![g; v.len()])?;
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::SumAll(a) => {
                    let v = self.value(*a);
                    let g = grad.get(0, 0);
                    let da = Tensor2::from_vec(v.rows(), v.cols(), vec![g; v.len()])?;
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::SliceCol(a, col) => {
                    let v = self.value(*a);
                    let mut da = Tensor2::zeros(v.rows(), v.cols());
                    for r in 0..v.rows() {
                        da.set(r, *col, grad.get(r, 0));
                    }
                    accumulate(&mut adjoints, a.0, da);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (self.value(*a), self.value(*c));
                    let mut da = grad.clone();
                    let mut dc = Tensor2::zeros(cv.rows(), 1);
                    for r in 0..av.rows() {
                        let factor = cv.get(r, 0);
                        let mut dot = 0.0;
                        for (o, &x) in da.row_mut(r).iter_mut().zip(av.row(r)) {
                            dot += *o * x;
                            *o *= factor;
                        }
                        dc.set(r, 0, dot);
                    }
                    accumulate(&mut adjoints, a.0, da);
                    accumulate(&mut adjoints, c.0, dc);
                }
            }
        }

        let mut grads = HashMap::new();
        for &(id, var) in &self.param_vars {
            if let Some(g) = adjoints[var.0].take() {
                grads.insert(id, g);
            }
        }
        Ok(ParamGrads { grads })
    }
}

fn accumulate(adjoints: &mut [Option<Tensor2>], idx: usize, grad: Tensor2) {
    match &mut adjoints[idx] {
        Some(existing) => existing.add_scaled(&grad, 1.0),
        slot @ None => *slot = Some(grad),
    }
}

pub(crate) fn softmax_rows_value(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
