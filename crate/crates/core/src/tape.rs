//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one record to the [`Tape`], holding references to
//! its inputs and whatever forward values the backward pass needs. Records are
//! only ever appended after their inputs, so the record order is a topological
//! order and [`Tape::backward`] is a single reverse sweep that visits each
//! record once. All reductions run in a fixed sequential order, so repeated
//! runs are bit-identical.

use std::borrow::Cow;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which GELU formula to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeluForm {
    /// `x · Φ(x)` with the exact error function.
    Erf,
    /// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
    Tanh,
}

/// GELU form used by the encoder feed-forward blocks and the prompt MLPs.
pub const GELU_FORM: GeluForm = GeluForm::Erf;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var, form: GeluForm },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for a single backward pass.
///
/// Parameters can be borrowed (`Cow::Borrowed`) so binding a model onto a
/// fresh tape costs no copies.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not require a gradient or the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, s, &[0, 0])),
    }
}

/// Rows and width of a tensor treated as a stack of rows over its last axis.
fn row_dims(t: &Tensor) -> (usize, usize) {
    let cols = t.shape().last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { t.numel() / cols };
    (rows, cols)
}

fn gelu_value(x: f64, form: GeluForm) -> f64 {
    match form {
        GeluForm::Erf => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        GeluForm::Tanh => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh()),
    }
}

fn gelu_derivative(x: f64, form: GeluForm) -> f64 {
    match form {
        GeluForm::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
        }
        GeluForm::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_cow(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_cow(Cow::Owned(value), false)
    }

    /// A borrowed constant input, e.g. a frozen parameter.
    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf_cow(Cow::Borrowed(value), false)
    }

    /// A borrowed trainable input.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.leaf_cow(Cow::Borrowed(value), true)
    }

    pub fn param_owned(&mut self, value: Tensor) -> Var {
        self.leaf_cow(Cow::Owned(value), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` with `b` stored as `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", av)?;
        let (br, bc) = matrix_dims("matmul", bv)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds a `[c]` bias to every row of `x[.., c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = row_dims(xv);
        if bv.numel() != cols || xv.shape().is_empty() {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                context: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Row-wise softmax over `x[r×c]` restricted to columns where
    /// `key_valid` is set. Masked columns get weight exactly zero; a row with
    /// no valid column is all zeros.
    pub fn masked_softmax(&mut self, x: Var, key_valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims("masked_softmax", xv)?;
        if key_valid.len() != cols {
            return Err(shape_err("masked_softmax", xv.shape(), &[key_valid.len()]));
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(key_valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if key_valid[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax { x }, rg))
    }

    /// Normalizes each row of `x` over its last axis to zero mean and unit
    /// (biased) variance, then applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = row_dims(xv);
        if gv.numel() != cols || bv.numel() != cols || xv.shape().is_empty() {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let src = xv.data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let h = (row[j] - mean) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var, form: GeluForm) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_value(v, form)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x, form }, rg)
    }

    /// `-log softmax(logits)[target]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.numel();
        if target >= n {
            return Err(Error::Index {
                context: "cross_entropy target",
                index: target,
                len: n,
            });
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + (max - lv.data()[target]);
        let probs = exps.iter().map(|e| e / total).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Rows `table[ids[i]]` stacked into `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = matrix_dims("gather_rows", tv)?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let (_, cols) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            let (r, c) = matrix_dims("concat_rows", pv)?;
            if c != cols {
                return Err(shape_err("concat_rows", &[rows, cols], pv.shape()));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (rows, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = self.value(*p);
            let (r, c) = matrix_dims("concat_cols", pv)?;
            if r != rows {
                return Err(shape_err("concat_cols", &[rows], pv.shape()));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims("slice_rows", xv)?;
        if range.start > range.end || range.end > rows {
            return Err(Error::Index {
                context: "slice_rows",
                index: range.end,
                len: rows,
            });
        }
        let data = xv.data()[range.start * cols..range.end * cols].to_vec();
        let value = Tensor::new(vec![range.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start: range.start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = matrix_dims("slice_cols", xv)?;
        if range.start > range.end || range.end > cols {
            return Err(Error::Index {
                context: "slice_cols",
                index: range.end,
                len: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * range.len());
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + range.start..r * cols + range.end]);
        }
        let value = Tensor::new(vec![rows, range.len()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start: range.start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every variable that requires a gradient and that `loss` depends on
    /// receives one; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("loss {loss:?} is not on this tape")))?;
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.0] = Some(Tensor::ones(node.value.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    // dA = G · op(B)ᵀ
                    gemm(m, n, k, gd, false, bv.data(), !trans_b, &mut da, false);
                    accumulate(grads, *a, av.shape(), da);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is [n×k]: dB = Gᵀ · A
                        gemm(n, m, k, gd, true, av.data(), false, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(grads, *v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, av.shape(), d);
                }
                if needs(b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, bv.shape(), d);
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|g| g * c).collect();
                accumulate(grads, *x, g.shape(), d);
            }
            Op::AddBias { x, bias } => {
                if needs(x) {
                    accumulate(grads, *x, g.shape(), gd.to_vec());
                }
                if needs(bias) {
                    let bv = self.value(*bias);
                    let cols = bv.numel();
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, bv.shape(), db);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, shape, dx);
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate(grads, *x, node.value.shape(), dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let cols = gv.numel();
                let rows = rstd.len();
                if needs(gamma) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += gd[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                    accumulate(grads, *gamma, gv.shape(), dg);
                }
                if needs(beta) {
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *beta, self.value(*beta).shape(), db);
                }
                if needs(x) {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..cols {
                            let dh = gd[r * cols + j] * gv.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * cols + j];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for j in 0..cols {
                            let dh = gd[r * cols + j] * gv.data()[j];
                            let h = xhat[r * cols + j];
                            dx[r * cols + j] = rstd[r] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, node.value.shape(), dx);
                }
            }
            Op::Gelu { x, form } => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * gelu_derivative(v, *form))
                    .collect();
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let up = gd[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * up).collect();
                d[*target] -= up;
                accumulate(grads, *logits, self.value(*logits).shape(), d);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.numel()]);
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] += gd[i * cols + j];
                    }
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let len = pv.numel();
                    if needs(p) {
                        accumulate(grads, *p, pv.shape(), gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.shape()[1];
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * cols + start..r * cols + start + w]);
                        }
                        accumulate(grads, *p, pv.shape(), d);
                    }
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut d = vec![0.0; xv.numel()];
                d[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let w = g.shape()[1];
                let mut d = vec![0.0; xv.numel()];
                for r in 0..g.shape()[0] {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.value(*x).shape(), gd.to_vec());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape matches its value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Eager forms of the core operations, for callers that do not need gradients.
pub mod eager {
    use super::{GeluForm, Tape};
    use crate::error::Result;
    use crate::tensor::Tensor;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant_ref(a), tape.constant_ref(b));
        let out = tape.matmul(a, b)?;
        Ok(tape.value(out).clone())
    }

    pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(x);
        let out = tape.softmax(x, axis)?;
        Ok(tape.value(out).clone())
    }

    pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, g, b) = (tape.constant_ref(x), tape.constant_ref(gamma), tape.constant_ref(beta));
        let out = tape.layer_norm(x, g, b, eps)?;
        Ok(tape.value(out).clone())
    }

    pub fn gelu(x: &Tensor, form: GeluForm) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant_ref(x);
        let out = tape.gelu(x, form);
        tape.value(out).clone()
    }

    pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.constant_ref(logits);
        let out = tape.cross_entropy(l, target)?;
        Ok(tape.value(out).item())
    }
}
