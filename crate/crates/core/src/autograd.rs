//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive pushes a node onto a [`Tape`] holding its value and the
//! handles of its inputs. [`Tape::backward`] walks the tape in reverse and
//! leaves exact partial derivatives on every node that depends on a
//! differentiable leaf. Parameter gradients are then added (never assigned)
//! into the owning [`ParamStore`], so callers zero them between steps.
//!
//! Broadcasting is limited to the explicit vector-over-rows forms
//! ([`Tape::add_row_vec`], [`Tape::broadcast_rows`], [`Tape::scale_by`]);
//! every other binary primitive requires identical shapes.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3; // ln(2*pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRowVec(Var, Var),
    BroadcastRows(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    ClampMin(Var, f64),
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        dilation: usize,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    WeightedSum(Var, Rc<Vec<f64>>),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SliceRows(Var, usize),
    PickPerRow(Var, Rc<Vec<usize>>),
    Reshape(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    GaussianPairs {
        y: Var,
        mu: Var,
        logvar: Var,
        pairs: Rc<Vec<(usize, usize)>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, len, inner) lane counts.
fn lanes(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    bound_const: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable leaf (gradient recorded).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Binds a parameter. Frozen parameters bind as constants. Repeated
    /// binds of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.bound.insert(id, v);
        v
    }

    /// Binds a parameter's current value as a constant (gradient-detached).
    pub fn param_const(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_const.get(&id) {
            return v;
        }
        let v = self.constant(store.value(id).clone());
        self.bound_const.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 || self.value(a).rank() > 2 || self.value(b).rank() > 2 {
            return Err(shape_err(
                "matmul",
                format!(
                    "lhs {:?} incompatible with rhs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!(
                    "lhs {:?} incompatible with rhs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operands {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let t = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Adds vector `v` (length = columns of `a`) to every row of `a`.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        if self.value(v).numel() != n {
            return Err(shape_err(
                "add_row_vec",
                format!("matrix {:?} with vector {:?}", self.shape(a), self.shape(v)),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        let vd = self.value(v).data();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(vd) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowVec(a, v), rg))
    }

    /// Repeats vector `v` as `rows` identical rows (vector broadcast over time).
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let d = self.value(v).numel();
        let src = self.value(v).data();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::BroadcastRows(v), rg))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err(
                "scale_by",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    // ----- convolution ----------------------------------------------------

    /// 1-D convolution along time with zero "same" padding.
    ///
    /// `x` is `T x C_in`; `w` is `(kernel * C_in) x C_out`, tap-major
    /// (rows `j*C_in..(j+1)*C_in` hold tap `j`). `kernel` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Result<Var> {
        let (t_len, c_in) = as_matrix(self.value(x));
        let (wr, c_out) = as_matrix(self.value(w));
        if kernel == 0 || kernel.is_multiple_of(2) || dilation == 0 {
            return Err(shape_err(
                "conv1d",
                format!("kernel {} / dilation {} invalid", kernel, dilation),
            ));
        }
        if wr != kernel * c_in {
            return Err(shape_err(
                "conv1d",
                format!(
                    "weight {:?} does not match kernel {} x channels {}",
                    self.shape(w),
                    kernel,
                    c_in
                ),
            ));
        }
        let cols = im2col(self.value(x).data(), t_len, c_in, kernel, dilation);
        let mut out = vec![0.0; t_len * c_out];
        gemm(t_len, kernel * c_in, c_out, &cols, false, self.value(w).data(), false, 0.0, &mut out);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![t_len, c_out], out)?,
            Op::Conv1d {
                x,
                w,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    // ----- axis reductions ------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = lanes(&shape, axis, "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for_lanes(outer, len, inner, |idx| {
            let m = idx.clone().map(|i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in idx.clone() {
                out[i] = (out[i] - m).exp();
                s += out[i];
            }
            for i in idx {
                out[i] /= s;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = lanes(&shape, axis, "log_softmax")?;
        let mut out = self.value(a).data().to_vec();
        for_lanes(outer, len, inner, |idx| {
            let lse = lane_lse(idx.clone().map(|i| out[i]));
            for i in idx {
                out[i] -= lse;
            }
        });
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a, axis), rg))
    }

    /// log(sum(exp(a))) along `axis`; `-inf` entries are excluded cleanly.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = lanes(&shape, axis, "log_sum_exp")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let base = o * len * inner + k;
                out[o * inner + k] = lane_lse((0..len).map(|i| src[base + i * inner]));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(reduced_shape(&shape, axis), out)?,
            Op::LogSumExp(a, axis),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = lanes(&shape, axis, if mean { "mean" } else { "sum" })?;
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(a);
        let op = if mean {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        Ok(self.push(Tensor::new(reduced_shape(&shape, axis), out)?, op, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// `sum_i w_i a_i` over the flattened entries of `a`, with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(shape_err(
                "weighted_sum",
                format!(
                    "{} weights for tensor {:?}",
                    weights.len(),
                    self.shape(a)
                ),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, Rc::new(weights)), rg))
    }

    // ----- structure ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = lanes(&base, axis, "concat")?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("operand {:?} does not match {:?} off axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Index-gather of rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err(
                "gather_rows",
                format!("row {} out of {} rows", bad, m),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows(a, Rc::new(idx.to_vec())),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(shape_err(
                "pick_per_row",
                format!("{} indices for matrix {:?}", idx.len(), self.shape(a)),
            ));
        }
        let src = self.value(a).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(out),
            Op::PickPerRow(a, Rc::new(idx.to_vec())),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ----- similarity -----------------------------------------------------

    /// Scales every row to unit Euclidean norm (rows with norm below 1e-12
    /// are divided by 1e-12 instead).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            let r = &mut out[i * n..(i + 1) * n];
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows(a), rg))
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors.
    /// A zero-norm operand yields similarity 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(shape_err(
                "cosine",
                format!("operands {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let c = cosine_values(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// Diagonal-Gaussian log-densities for index pairs:
    /// `out[k] = log N(y[a_k]; mu[b_k], diag(exp(logvar[b_k])))`.
    pub fn gaussian_log_pdf_pairs(
        &mut self,
        y: Var,
        mu: Var,
        logvar: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let (ny, d) = as_matrix(self.value(y));
        let (nm, d2) = as_matrix(self.value(mu));
        if d != d2 || self.shape(mu) != self.shape(logvar) {
            return Err(shape_err(
                "gaussian_log_pdf_pairs",
                format!(
                    "y {:?}, mean {:?}, logvar {:?}",
                    self.shape(y),
                    self.shape(mu),
                    self.shape(logvar)
                ),
            ));
        }
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= ny || b >= nm) {
            return Err(shape_err(
                "gaussian_log_pdf_pairs",
                format!("pair ({}, {}) out of range ({}, {})", a, b, ny, nm),
            ));
        }
        let (yd, md, ld) = (
            self.value(y).data(),
            self.value(mu).data(),
            self.value(logvar).data(),
        );
        let out = pairs
            .iter()
            .map(|&(a, b)| {
                let yr = &yd[a * d..(a + 1) * d];
                let mr = &md[b * d..(b + 1) * d];
                let lr = &ld[b * d..(b + 1) * d];
                let mut s = 0.0;
                for c in 0..d {
                    let r = yr[c] - mr[c];
                    s += r * r * (-lr[c]).exp() + lr[c] + LN_2PI;
                }
                -0.5 * s
            })
            .collect();
        let rg = self.rg(y) || self.rg(mu) || self.rg(logvar);
        Ok(self.push(
            Tensor::vector(out),
            Op::GaussianPairs {
                y,
                mu,
                logvar,
                pairs: Rc::new(pairs.to_vec()),
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Adds the gradients of every bound, trainable parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let mut bound: Vec<(&ParamId, &Var)> = self.bound.iter().collect();
        bound.sort();
        for (&id, &v) in bound {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(v.0) {
                let p = store.get_mut(id);
                for (acc, &x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, 0.0, &mut da);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, 0.0, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), false, 0.0, &mut da);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g, true, self.value(*a).data(), false, 0.0, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(self.value(*a));
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::Shift(a) => self.acc(grads, *a, g.to_vec()),
            Op::AddRowVec(a, v) => {
                self.acc(grads, *a, g.to_vec());
                if self.rg(*v) {
                    self.acc(grads, *v, col_sums(g, self.value(*v).numel()));
                }
            }
            Op::BroadcastRows(v) => self.acc(grads, *v, col_sums(g, self.value(*v).numel())),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                self.acc(grads, *a, g.iter().map(|x| x * k).collect());
                if self.rg(*s) {
                    let ds = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                    self.acc(grads, *s, vec![ds]);
                }
            }
            Op::Exp(a) => self.acc(grads, *a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(av).map(|(x, y)| x / y).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Tanh(a) => self.acc(
                grads,
                *a,
                g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect(),
            ),
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, g.iter().zip(av).map(|(x, y)| 2.0 * x * y).collect());
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(x, &y)| if y > *floor { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Conv1d {
                x,
                w,
                kernel,
                dilation,
            } => {
                let (t_len, c_in) = as_matrix(self.value(*x));
                let c_out = self.value(*w).cols();
                let kc = kernel * c_in;
                if self.rg(*w) {
                    let cols = im2col(self.value(*x).data(), t_len, c_in, *kernel, *dilation);
                    let mut dw = vec![0.0; kc * c_out];
                    gemm(kc, t_len, c_out, &cols, true, g, false, 0.0, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; t_len * kc];
                    gemm(t_len, c_out, kc, g, false, self.value(*w).data(), true, 0.0, &mut dcols);
                    let dx = col2im(&dcols, t_len, c_in, *kernel, *dilation);
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis, "softmax").unwrap();
                let mut da = vec![0.0; g.len()];
                for_lanes(outer, len, inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * out[i]).sum();
                    for i in idx {
                        da[i] = out[i] * (g[i] - dot);
                    }
                });
                self.acc(grads, *a, da);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis, "log_softmax").unwrap();
                let mut da = vec![0.0; g.len()];
                for_lanes(outer, len, inner, |idx| {
                    let gs: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        da[i] = g[i] - out[i].exp() * gs;
                    }
                });
                self.acc(grads, *a, da);
            }
            Op::LogSumExp(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis, "log_sum_exp").unwrap();
                let av = self.value(*a).data();
                let mut da = vec![0.0; av.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let lse = out[o * inner + k];
                        let go = g[o * inner + k];
                        if !lse.is_finite() {
                            continue;
                        }
                        for l in 0..len {
                            let j = o * len * inner + l * inner + k;
                            da[j] = go * (av[j] - lse).exp();
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, len, inner) = lanes(self.shape(*a), *axis, "sum").unwrap();
                let s = if matches!(node.op, Op::Mean(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for k in 0..inner {
                            da[(o * len + l) * inner + k] = g[o * inner + k] * s;
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::SumAll(a) => self.acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::WeightedSum(a, w) => self.acc(grads, *a, w.iter().map(|x| x * g[0]).collect()),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = lanes(node.value.shape(), *axis, "concat").unwrap();
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        self.acc(grads, p, dp);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = as_matrix(self.value(*a));
                let mut da = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..n {
                        da[src * n + c] += g[r * n + c];
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let (m, n) = as_matrix(self.value(*a));
                let mut da = vec![0.0; m * n];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                self.acc(grads, *a, da);
            }
            Op::PickPerRow(a, idx) => {
                let (m, n) = as_matrix(self.value(*a));
                let mut da = vec![0.0; m * n];
                for (r, &c) in idx.iter().enumerate() {
                    da[r * n + c] = g[r];
                }
                self.acc(grads, *a, da);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::NormalizeRows(a) => {
                let (m, n) = as_matrix(self.value(*a));
                let av = self.value(*a).data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let x = &av[r * n..(r + 1) * n];
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > NORM_EPS {
                        let gy: f64 = gr.iter().zip(y).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            da[r * n + c] = (gr[c] - y[c] * gy) / norm;
                        }
                    } else {
                        for c in 0..n {
                            da[r * n + c] = gr[c] / NORM_EPS;
                        }
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na <= NORM_EPS || nb <= NORM_EPS {
                    self.acc(grads, *a, vec![0.0; av.len()]);
                    self.acc(grads, *b, vec![0.0; bv.len()]);
                    return;
                }
                let c = out[0];
                let da = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| g[0] * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| g[0] * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::GaussianPairs {
                y,
                mu,
                logvar,
                pairs,
            } => {
                let d = self.value(*y).cols();
                let (yd, md, ld) = (
                    self.value(*y).data(),
                    self.value(*mu).data(),
                    self.value(*logvar).data(),
                );
                let mut dy = vec![0.0; yd.len()];
                let mut dm = vec![0.0; md.len()];
                let mut dl = vec![0.0; ld.len()];
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    let gk = g[k];
                    if gk == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let r = yd[a * d + c] - md[b * d + c];
                        let prec = (-ld[b * d + c]).exp();
                        dy[a * d + c] -= gk * r * prec;
                        dm[b * d + c] += gk * r * prec;
                        dl[b * d + c] += gk * 0.5 * (r * r * prec - 1.0);
                    }
                }
                self.acc(grads, *y, dy);
                self.acc(grads, *mu, dm);
                self.acc(grads, *logvar, dl);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

const NORM_EPS: f64 = 1e-12;

pub(crate) fn cosine_values(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn lane_lse(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Calls `f` with the flat indices of every lane along the split axis.
fn for_lanes(
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for k in 0..inner {
            let start = o * len * inner + k;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn col_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for row in g.chunks(n) {
        for (acc, &x) in s.iter_mut().zip(row) {
            *acc += x;
        }
    }
    s
}

fn tap_offset(j: usize, kernel: usize, dilation: usize) -> isize {
    (j as isize - (kernel as isize - 1) / 2) * dilation as isize
}

fn im2col(x: &[f64], t_len: usize, c_in: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let kc = kernel * c_in;
    let mut cols = vec![0.0; t_len * kc];
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + tap_offset(j, kernel, dilation);
            if src >= 0 && (src as usize) < t_len {
                let s = src as usize;
                cols[t * kc + j * c_in..t * kc + (j + 1) * c_in]
                    .copy_from_slice(&x[s * c_in..(s + 1) * c_in]);
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], t_len: usize, c_in: usize, kernel: usize, dilation: usize) -> Vec<f64> {
    let kc = kernel * c_in;
    let mut dx = vec![0.0; t_len * c_in];
    for t in 0..t_len {
        for j in 0..kernel {
            let src = t as isize + tap_offset(j, kernel, dilation);
            if src >= 0 && (src as usize) < t_len {
                let s = src as usize;
                for c in 0..c_in {
                    dx[s * c_in + c] += cols[t * kc + j * c_in + c];
                }
            }
        }
    }
    dx
}
