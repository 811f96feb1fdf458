//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only Wengert list: every op pushes one record
//! whose inputs were all pushed earlier, so the record index order is already
//! a topological order. [`Tape::backward`] walks it once in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to `q` before taking logs in the KL divergence.
pub const KL_CLAMP: f64 = 1e-12;
/// Tolerance on row sums when validating distributions.
pub const DISTRIBUTION_TOL: f64 = 1e-6;
/// Floor on the per-image standard deviation in [`Tape::standardize`].
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug)]
#[allow(dead_code)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Standardize {
        x: Var,
        sigma: Vec<f64>,
        floored: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl {
        p: Var,
        q: Var,
    },
    Sum(Var),
    Mean(Var),
    RowL2Norm(Var),
    LogitMargin {
        z: Var,
        pairs: Vec<Option<(usize, usize)>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`; zeros when `v` did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrowed view; `None` when the gradient is identically zero.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Validates that every row (last axis) of `t` is a probability distribution.
pub fn validate_distribution(t: &Tensor) -> Result<()> {
    let k = *t.shape().last().unwrap_or(&0);
    for (r, row) in t.data().chunks(k.max(1)).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "row {r} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Validation(format!("row {r} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Per-row KL divergence `sum p ln(p / max(q, 1e-12))`, `0 ln 0 = 0`.
pub fn kl_rows(p: &Tensor, q: &Tensor) -> Result<Vec<f64>> {
    check_same("kl_divergence", p, q)?;
    validate_distribution(p)?;
    validate_distribution(q)?;
    let k = *p.shape().last().unwrap();
    Ok(p.data()
        .chunks(k)
        .zip(q.data().chunks(k))
        .map(|(pr, qr)| kl_row(pr, qr))
        .collect())
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (math::ln(pi) - math::ln(qi.max(KL_CLAMP)))
            } else {
                0.0
            }
        })
        .sum()
}

/// Batch-mean KL divergence between two distribution tensors.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    let rows = kl_rows(p, q)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Softmax along the last axis without a tape.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let k = *z.shape().last().unwrap();
    let mut out = z.clone();
    for row in out.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Output spatial size and leading padding for a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                None
            } else {
                Some((out, total / 2))
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Evaluation(format!(
                "forward pass produced NaN/Inf at record {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        if bv.shape().len() != 1 || xv.shape().last() != Some(&n) {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddBias(x, b), rg)
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, "mul", |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + math::exp(-v))
            } else {
                let e = math::exp(v);
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), math::tanh)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Collapses everything but the batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.batch(), v.item_len()];
        self.reshape(x, &shape)
    }

    /// 2-D cross-correlation. `x: [N, H, W, C_in]`, `filters: [kh, kw, C_in, C_out]`.
    pub fn conv2d(&mut self, x: Var, filters: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(filters));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || stride == 0 {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let (n, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        let (ho, pt) = conv_out_dim(h, kh, stride, padding).ok_or_else(|| Error::dim("conv2d", xs, ws))?;
        let (wo, pl) = conv_out_dim(w, kw, stride, padding).ok_or_else(|| Error::dim("conv2d", xs, ws))?;
        let mut out = vec![0.0; n * ho * wo * co];
        let (xd, wd) = (xv.data(), wv.data());
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * co;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * w + ix as usize) * ci;
                            let wbase = (ky * kw + kx) * ci * co;
                            for c in 0..ci {
                                let xval = xd[xbase + c];
                                if xval == 0.0 {
                                    continue;
                                }
                                let wrow = &wd[wbase + c * co..wbase + (c + 1) * co];
                                for (o, &wt) in out[obase..obase + co].iter_mut().zip(wrow) {
                                    *o += xval * wt;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, filters]);
        self.push(
            Tensor::new(vec![n, ho, wo, co], out)?,
            Op::Conv2d {
                x,
                w: filters,
                stride,
                pad_top: pt,
                pad_left: pl,
            },
            rg,
        )
    }

    /// Max pooling over `window x window` patches (no padding). Gradient ties
    /// route to the first maximum in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape();
        if xs.len() != 4 || window == 0 || stride == 0 || window > xs[1] || window > xs[2] {
            return Err(Error::dim("maxpool2d", xs, &[window, window]));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for ky in 0..window {
                            for kx in 0..window {
                                let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                                if best == usize::MAX || xd[idx] > best_v {
                                    best = idx;
                                    best_v = xd[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, ho, wo, c], out)?, Op::MaxPool { x, argmax }, rg)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::dim("softmax", xv.shape(), &[axis]));
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = d[(o * n + j) * inner + i];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    d[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).shape().len() - 1;
        self.softmax(x, axis)
    }

    /// Per-item standardization `(x - mean) / max(std, 1e-6)`.
    pub fn standardize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.item_len();
        let mut out = xv.clone();
        let mut sigma = Vec::with_capacity(xv.batch());
        let mut floored = Vec::with_capacity(xv.batch());
        for item in out.data_mut().chunks_mut(k) {
            let mu = item.iter().sum::<f64>() / k as f64;
            let var = item.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
            let sd = math::sqrt(var);
            let s = sd.max(STD_FLOOR);
            for v in item.iter_mut() {
                *v = (*v - mu) / s;
            }
            sigma.push(s);
            floored.push(sd < STD_FLOOR);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Standardize { x, sigma, floored }, rg)
    }

    /// Mean cross-entropy `-ln softmax(z)[y]` over the batch, from logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let zv = self.value(logits);
        if zv.shape().len() != 2 || zv.batch() != labels.len() {
            return Err(Error::dim("cross_entropy", zv.shape(), &[labels.len()]));
        }
        let k = zv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(zv).into_data();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &zv.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + math::ln(row.iter().map(|v| math::exp(v - m)).sum::<f64>());
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Batch-mean `D_KL(p || q)` over rows of the last axis. Both inputs are
    /// validated as distributions.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let v = kl_divergence(self.value(p), self.value(q))?;
        let rg = self.rg(&[p, q]);
        self.push(Tensor::scalar(v), Op::Kl { p, q }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Euclidean norm of each batch item, `[N, ...] -> [N]`.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let k = v.item_len();
        let norms: Vec<f64> = v
            .data()
            .chunks(k)
            .map(|r| math::sqrt(r.iter().map(|a| a * a).sum()))
            .collect();
        let n = norms.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n], norms)?, Op::RowL2Norm(x), rg)
    }

    /// Untargeted logit margin `max(z[y] - max_{i != y} z[i], -kappa)` per row.
    pub fn logit_margin(&mut self, z: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape().len() != 2 || zv.batch() != labels.len() || zv.shape()[1] < 2 {
            return Err(Error::dim("logit_margin", zv.shape(), &[labels.len()]));
        }
        let k = zv.shape()[1];
        let mut out = Vec::with_capacity(labels.len());
        let mut pairs = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Data(format!("label {y} out of range for {k} classes")));
            }
            let row = &zv.data()[i * k..(i + 1) * k];
            let mut other = usize::MAX;
            for j in 0..k {
                if j != y && (other == usize::MAX || row[j] > row[other]) {
                    other = j;
                }
            }
            let m = row[y] - row[other];
            if m > -kappa {
                out.push(m);
                pairs.push(Some((y, other)));
            } else {
                out.push(-kappa);
                pairs.push(None);
            }
        }
        let n = out.len();
        let rg = self.rg(&[z]);
        self.push(Tensor::new(vec![n], out)?, Op::LogitMargin { z, pairs }, rg)
    }

    /// Reverse-mode sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Contract("output is not on this tape".into()));
        }
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Adds into the gradient slot of `v` when it participates in differentiation.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += aik * gv;
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Relu(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    if y[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > *lo && xd[i] < *hi {
                            gx[i] += g[i];
                        }
                    }
                })
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad_top,
                pad_left,
            } => self.conv_backward(node, g, grads, *x, *w, *stride, *pad_top, *pad_left),
            Op::MaxPool { x, argmax } => self.acc(grads, *x, |gx| {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Standardize { x, sigma, floored } => {
                let k = node.value.item_len();
                self.acc(grads, *x, |gx| {
                    for (b, ((gi, yi), gxi)) in g
                        .chunks(k)
                        .zip(y.chunks(k))
                        .zip(gx.chunks_mut(k))
                        .enumerate()
                    {
                        let mg = gi.iter().sum::<f64>() / k as f64;
                        let mgy = if floored[b] {
                            0.0
                        } else {
                            gi.iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() / k as f64
                        };
                        for j in 0..k {
                            gxi[j] += (gi[j] - mg - yi[j] * mgy) / sigma[b];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                self.acc(grads, *logits, |gz| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == lab { 1.0 } else { 0.0 };
                            gz[i * k + j] += scale * (probs[i * k + j] - t);
                        }
                    }
                });
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let k = *pv.shape().last().unwrap();
                let rows = pv.len() / k;
                let scale = g[0] / rows as f64;
                let (pd, qd) = (pv.data(), qv.data());
                self.acc(grads, *p, |gp| {
                    for i in 0..gp.len() {
                        let lp = math::ln(pd[i].max(KL_CLAMP));
                        gp[i] += scale * (lp + 1.0 - math::ln(qd[i].max(KL_CLAMP)));
                    }
                });
                self.acc(grads, *q, |gq| {
                    for i in 0..gq.len() {
                        if qd[i] > KL_CLAMP {
                            gq[i] -= scale * pd[i] / qd[i];
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::RowL2Norm(x) => {
                let xv = self.value(*x);
                let k = xv.item_len();
                self.acc(grads, *x, |gx| {
                    for (r, (gr, xr)) in gx.chunks_mut(k).zip(xv.data().chunks(k)).enumerate() {
                        if y[r] > 0.0 {
                            for (o, &xi) in gr.iter_mut().zip(xr) {
                                *o += g[r] * xi / y[r];
                            }
                        }
                    }
                })
            }
            Op::LogitMargin { z, pairs } => {
                let k = self.value(*z).shape()[1];
                self.acc(grads, *z, |gz| {
                    for (r, pair) in pairs.iter().enumerate() {
                        if let Some((a, b)) = pair {
                            gz[r * k + a] += g[r];
                            gz[r * k + b] -= g[r];
                        }
                    }
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        stride: usize,
        pt: usize,
        pl: usize,
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let (n, h, wd_, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
        let (xd, wd) = (xv.data(), wv.data());
        // visit every (output, kernel tap) pair once, feeding both gradients
        let mut gx_buf = if self.nodes[x.0].requires_grad {
            Some(vec![0.0; xv.len()])
        } else {
            None
        };
        let mut gw_buf = if self.nodes[w.0].requires_grad {
            Some(vec![0.0; wv.len()])
        } else {
            None
        };
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * co;
                    let go = &g[obase..obase + co];
                    if go.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix < 0 || ix >= wd_ as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * wd_ + ix as usize) * ci;
                            let wbase = (ky * kw + kx) * ci * co;
                            for c in 0..ci {
                                let wrow = &wd[wbase + c * co..wbase + (c + 1) * co];
                                if let Some(gx) = gx_buf.as_mut() {
                                    gx[xbase + c] += go.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gw) = gw_buf.as_mut() {
                                    let xval = xd[xbase + c];
                                    if xval != 0.0 {
                                        for (o, &gv) in gw[wbase + c * co..wbase + (c + 1) * co].iter_mut().zip(go) {
                                            *o += xval * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx_buf {
            self.acc(grads, x, |dst| add_into(dst, &gx));
        }
        if let Some(gw) = gw_buf {
            self.acc(grads, w, |dst| add_into(dst, &gw));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
