//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value and enough
//! information to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and a
//! single reverse pass over it populates every reachable gradient.
//!
//! Gradients accumulate across sweeps until [`Tape::zero_grad`] is called.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Additive stand-in for `-inf` applied to masked logits before exponentiation.
pub const MASK_FILL: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats along every row of the left operand.
    Trailing,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Shift(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Powf(Var, f64),
    LogSigmoid(Var),
    ClampMin(Var, f64),
    XLogX(Var),
    /// Row reduction with fixed normalized weights.
    WeightedRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    t.shape2().unwrap_or((t.numel() / t.dims().last().copied().unwrap_or(1), *t.dims().last().unwrap_or(&1)))
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by previous sweeps, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Snapshot of `v` with its gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.requires_grad = node.requires_grad;
        t.grad = if node.requires_grad {
            Some(self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        } else {
            None
        };
        t
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input; gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.dims().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (ta.shape2(), tb.shape2()) else {
            return Err(Error::shape("matmul", &[ta.dims(), tb.dims()]));
        };
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.dims(), tb.dims()]));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let Some((r, c)) = ta.shape2() else {
            return Err(Error::shape("transpose", &[ta.dims()]));
        };
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    // ---- elementwise binary ---------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() == tb.dims() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.numel() == *ta.dims().last().unwrap()
            && tb.dims().iter().rev().skip(1).all(|&d| d == 1)
        {
            Ok(Bcast::Trailing)
        } else {
            Err(Error::shape(op, &[ta.dims(), tb.dims()]))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let n = bd.len();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bd[i],
                    Bcast::Scalar => bd[0],
                    Bcast::Trailing => bd[i % n],
                };
                f(x, y)
            })
            .collect();
        let t = Tensor::new(ta.dims().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, mk(a, b, bc), rg))
    }

    /// `a + b`; `b` may be same-shaped, a trailing-dimension row, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax along the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax along the last axis where `keep[j] == false` excludes column
    /// `j` of every row (`keep.len() == cols`) or element `j` (`keep.len() == numel`).
    /// Excluded entries come out as exact zeros.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2(ta);
        if let Some(k) = keep {
            if k.len() != cols && k.len() != ta.numel() {
                return Err(Error::shape("masked_softmax", &[ta.dims(), &[k.len()]]));
            }
        }
        let keep_at = |i: usize, j: usize| match keep {
            None => true,
            Some(k) if k.len() == cols => k[j],
            Some(k) => k[i * cols + j],
        };
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let o = &mut out[i * cols..(i + 1) * cols];
            let mut any = false;
            for j in 0..cols {
                o[j] = if keep_at(i, j) {
                    any = true;
                    row[j]
                } else {
                    row[j] + MASK_FILL
                };
            }
            if !any {
                return Err(Error::Usage(format!("masked_softmax: row {i} is fully masked")));
            }
            let mx = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in o.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for (j, v) in o.iter_mut().enumerate() {
                *v = if keep_at(i, j) { *v / z } else { 0.0 };
            }
        }
        let t = Tensor::new(ta.dims().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = dims2(tx);
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::shape("layer_norm", &[tx.dims(), tg.dims(), tb.dims()]));
        }
        let src = tx.data();
        let (g, b) = (tg.data(), tb.data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.dims().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- elementwise unary ----------------------------------------------

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                value: v,
                reason: "requires x > 0",
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// `x^p` for a fixed exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        for &v in self.value(a).data() {
            if v < 0.0 && !integral {
                return Err(Error::Domain {
                    op: "powf",
                    value: v,
                    reason: "negative base with non-integer exponent",
                });
            }
            if v == 0.0 && p < 1.0 && p != 0.0 {
                return Err(Error::Domain {
                    op: "powf",
                    value: v,
                    reason: "zero base with exponent below one",
                });
            }
        }
        Ok(self.unary(a, Op::Powf(a, p), |x| x.powf(p)))
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// `x ln x` with `0 ln 0 = 0`; requires `x >= 0`.
    pub fn xlogx(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "xlogx",
                value: v,
                reason: "requires x >= 0",
            });
        }
        Ok(self.unary(a, Op::XLogX(a), |x| if x > 0.0 { x * x.ln() } else { 0.0 }))
    }

    // ---- reductions and indexing ----------------------------------------

    /// Weighted mean of the rows of `a` over positions where `mask` is set.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, _) = dims2(ta);
        if mask.len() != rows {
            return Err(Error::shape("masked_mean_rows", &[ta.dims(), &[mask.len()]]));
        }
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Usage("masked_mean_rows: empty mask".into()));
        }
        let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
        self.weighted_rows(a, w)
    }

    fn weighted_rows(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2(ta);
        let src = ta.data();
        let mut out = vec![0.0; cols];
        for (i, &wi) in w.iter().enumerate().take(rows) {
            if wi == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                *o += wi * v;
            }
        }
        let t = Tensor::new(vec![1, cols], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::WeightedRows(a, w), rg))
    }

    /// Concatenates rank-2 tensors with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2(self.value(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p));
            if r != rows {
                let dims: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).dims()).collect();
                return Err(Error::shape("concat_cols", &dims));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2(ta);
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::shape("select_rows", &[ta.dims(), idx]));
        }
        let src = ta.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SelectRows(a, idx.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = dims2(ta);
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", &[ta.dims(), &[start, len]]));
        }
        let src = ta.data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols(a, start, len), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates `∂loss/∂v` into the gradient of every node that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Each sweep propagates only its own contribution, then adds it to
        // whatever earlier sweeps accumulated.
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc(&mut g, &self.nodes, loss)[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.vjp(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        self.grads.resize(self.nodes.len(), None);
        for (dst, src) in self.grads.iter_mut().zip(g) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let unary = |g: &mut [Option<Vec<f64>>], a: Var, f: &dyn Fn(f64, f64) -> f64| {
            if !rg(a) {
                return;
            }
            let x = val(a).data();
            let y = out.data();
            let ga = acc(g, nodes, a);
            for k in 0..ga.len() {
                ga[k] += gout[k] * f(x[k], y[k]);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).shape2().unwrap();
                let n = val(*b).shape2().unwrap().1;
                if rg(*a) {
                    let bd = val(*b).data();
                    gemm_nt_acc(gout, bd, acc(g, nodes, *a), m, k, n);
                }
                if rg(*b) {
                    let ad = val(*a).data();
                    gemm_tn_acc(ad, gout, acc(g, nodes, *b), m, k, n);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let (r, c) = val(*a).shape2().unwrap();
                    let ga = acc(g, nodes, *a);
                    for p in 0..r {
                        for q in 0..c {
                            ga[p * c + q] += gout[q * r + p];
                        }
                    }
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = acc(g, nodes, *a);
                    for (x, &y) in ga.iter_mut().zip(gout) {
                        *x += y;
                    }
                }
                if rg(*b) {
                    reduce_bcast(acc(g, nodes, *b), gout, *bc, |_| sign);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let n = bd.len();
                if rg(*a) {
                    let ga = acc(g, nodes, *a);
                    for k in 0..ga.len() {
                        let y = match bc {
                            Bcast::Same => bd[k],
                            Bcast::Scalar => bd[0],
                            Bcast::Trailing => bd[k % n],
                        };
                        ga[k] += gout[k] * y;
                    }
                }
                if rg(*b) {
                    reduce_bcast(acc(g, nodes, *b), gout, *bc, |k| ad[k]);
                }
            }
            Op::Scale(a, c) => unary(g, *a, &|_, _| *c),
            Op::Shift(a) => unary(g, *a, &|_, _| 1.0),
            Op::Softmax(a) => {
                if rg(*a) {
                    let (rows, cols) = dims2(out);
                    let y = out.data();
                    let ga = acc(g, nodes, *a);
                    for r in 0..rows {
                        let s = r * cols..(r + 1) * cols;
                        let dot: f64 = y[s.clone()].iter().zip(&gout[s.clone()]).map(|(p, q)| p * q).sum();
                        for k in s {
                            ga[k] += y[k] * (gout[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = dims2(out);
                let gn = val(*gain).data();
                if rg(*gain) {
                    let gg = acc(g, nodes, *gain);
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += gout[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = acc(g, nodes, *bias);
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] += gout[r * cols + j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = acc(g, nodes, *x);
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            dxh[j] = gout[base + j] * gn[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[base + j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            gx[base + j] += rstd[r] * (dxh[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => unary(g, *a, &|x, _| gelu_grad(x)),
            Op::Tanh(a) => unary(g, *a, &|_, y| 1.0 - y * y),
            Op::Sigmoid(a) => unary(g, *a, &|_, y| y * (1.0 - y)),
            Op::Relu(a) => unary(g, *a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Abs(a) => unary(g, *a, &|x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
            Op::Log(a) => unary(g, *a, &|x, _| 1.0 / x),
            Op::Exp(a) => unary(g, *a, &|_, y| y),
            Op::Powf(a, p) => unary(g, *a, &|x, _| if *p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) }),
            Op::LogSigmoid(a) => unary(g, *a, &|x, _| sigmoid(-x)),
            Op::ClampMin(a, lo) => unary(g, *a, &|x, _| if x > *lo { 1.0 } else { 0.0 }),
            Op::XLogX(a) => unary(g, *a, &|x, _| if x > 0.0 { x.ln() + 1.0 } else { 0.0 }),
            Op::WeightedRows(a, w) => {
                if rg(*a) {
                    let cols = gout.len();
                    let ga = acc(g, nodes, *a);
                    for (r, &wr) in w.iter().enumerate() {
                        if wr == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            ga[r * cols + j] += wr * gout[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(out);
                let mut off = 0;
                for &p in parts {
                    let w = dims2(val(p)).1;
                    if rg(p) {
                        let gp = acc(g, nodes, p);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += gout[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SelectRows(a, idx) => {
                if rg(*a) {
                    let cols = dims2(out).1;
                    let ga = acc(g, nodes, *a);
                    for (o, &r) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[r * cols + j] += gout[o * cols + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, start, len) => {
                if rg(*a) {
                    let (rows, cols) = dims2(val(*a));
                    let ga = acc(g, nodes, *a);
                    for r in 0..rows {
                        for j in 0..*len {
                            ga[r * cols + start + j] += gout[r * len + j];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    acc(g, nodes, *a).iter_mut().for_each(|x| *x += gout[0]);
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer for `v`.
fn acc<'a>(g: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

/// Sums an upstream gradient back onto a (possibly broadcast) right operand.
fn reduce_bcast(gb: &mut [f64], gout: &[f64], bc: Bcast, factor: impl Fn(usize) -> f64) {
    let n = gb.len();
    for (k, &go) in gout.iter().enumerate() {
        let slot = match bc {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Trailing => k % n,
        };
        gb[slot] += go * factor(k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = t.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).dims(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let s = t.softmax(a);
        for &v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_single_entry() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[5.0, 9.0]));
        let s = t.masked_softmax(a, &[true, false]).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[5.0, 9.0]));
        assert!(t.masked_softmax(a, &[false, false]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[1e4, 1e4 - 1.0, -1e4]));
        let s = t.softmax(a);
        assert!(t.value(s).is_finite());
        assert!((t.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_and_pow_domain_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row(&[1.0, 0.0]));
        assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
        let b = t.constant(Tensor::row(&[-2.0]));
        assert!(matches!(t.powf(b, 0.5), Err(Error::Domain { op: "powf", .. })));
        assert!(t.powf(b, 2.0).is_ok());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0, 3.0]).with_grad());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(0.0).with_grad());
        let one = t.constant(Tensor::scalar(1.0));
        let z = t.mul(w, one).unwrap();
        let s = t.sigmoid(z);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]).with_grad());
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_sweeps_after_reset_agree() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.3, -1.2, 2.0]).with_grad());
        let s = t.softmax(x);
        let l = t.log(s).unwrap();
        let loss = t.sum(l);
        t.backward(loss).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        t.backward(loss).unwrap();
        let doubled = t.grad(x).unwrap().to_vec();
        t.zero_grad();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &first[..]);
        for (a, b) in first.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stable_log_sigmoid_tails() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0) == 0.0 || log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
    }
}
