//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its value and whatever it needs for the backward sweep, so
//! node indices are already a topological order and [`Tape::backward`] simply
//! walks them in reverse.
//!
//! `backward` never accumulates into earlier results: every call starts from
//! a fresh set of buffers, so calling it twice on the same tape returns
//! identical gradients.

use rand::Rng;

use crate::tensor::{check_norm_params, dropout_mask, kernels, matmul_dims, Result, Tensor, TensorError};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on row sums accepted by [`Tape::cross_entropy`].
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool(Var, usize),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.to_vec()))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Row-major attention weights `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[.., n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.last_dim() {
            return Err(TensorError::Dimension {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vb.len();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity (and no node) in inference mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let vx = self.value(x);
        let Some(mask) = dropout_mask(vx.len(), rate, rng, training)? else {
            return Ok(x);
        };
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        check_norm_params(vx, vg, vb, eps)?;
        let d = vx.last_dim();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; vx.rows()];
        kernels::layer_norm(vx.data(), &mut xhat, &mut inv_std, d, eps);
        let mut data = xhat.clone();
        kernels::affine_rows(&mut data, vg.data(), vb.data());
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, d]` with each sample's rows
    /// contiguous; head `h` owns columns `h*d/heads .. (h+1)*d/heads`. Each
    /// head's scores are scaled by `1 / sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let shape = vq.shape().to_vec();
        for other in [vk, vv] {
            if other.shape() != shape.as_slice() {
                return Err(TensorError::Dimension {
                    op: "attention",
                    lhs: shape.clone(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        let [rows, d] = shape[..] else {
            return Err(TensorError::Dimension {
                op: "attention",
                lhs: shape.clone(),
                rhs: vec![seq_len, heads],
            });
        };
        if seq_len == 0 || heads == 0 || rows % seq_len != 0 || d % heads != 0 {
            return Err(TensorError::Dimension {
                op: "attention",
                lhs: shape.clone(),
                rhs: vec![seq_len, heads],
            });
        }
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let qi = &qd[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..seq_len {
                        let kj = &kd[(b * seq_len + j) * d + h * dh..][..dh];
                        p[i * seq_len + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                }
                kernels::softmax_rows(p, seq_len);
                for i in 0..seq_len {
                    let orow = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..seq_len {
                        let w = p[i * seq_len + j];
                        let vj = &vd[(b * seq_len + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Averages consecutive groups of `group` rows: `[b * group, d] -> [b, d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.rows();
        if group == 0 || !rows.is_multiple_of(group) {
            return Err(TensorError::Dimension {
                op: "mean_pool",
                lhs: vx.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let b = rows / group;
        let mut data = vec![0.0; b * d];
        for (r, row) in vx.data().chunks(d).enumerate() {
            let o = &mut data[(r / group) * d..][..d];
            for (acc, v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_parts(vec![b, d], data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanPool(x, group), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let out = Tensor::from_parts(vec![1], vec![s]);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over rows of `-Σ target · ln(clamp(prob, 1e-12, 1))`.
    pub fn cross_entropy(&mut self, probs: Var, onehot: &Tensor) -> Result<Var> {
        let loss = cross_entropy(self.value(probs), onehot)?;
        let out = Tensor::from_parts(vec![1], vec![loss]);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                target: onehot.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only nodes that need gradients keep them.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[var.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = matmul_dims(va.shape(), vb.shape()).expect("checked in forward");
                acc(*a, &mut |da| kernels::matmul_bt_acc(g, vb.data(), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_at_acc(va.data(), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb.data()) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f)),
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(vx.data()) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |d| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::Softmax(x) => {
                let y = &node.value;
                acc(*x, &mut |d| kernels::softmax_rows_backward(y.data(), g, d, y.last_dim()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gamma);
                let dim = vg.len();
                acc(*gamma, &mut |d| {
                    for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, g), xh) in d.iter_mut().zip(gr).zip(xr) {
                            *d += g * xh;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(dim) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
                acc(*x, &mut |d| {
                    let nd = dim as f64;
                    for (((dr, gr), xr), istd) in d
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(xhat.chunks(dim))
                        .zip(inv_std)
                    {
                        let dxhat: Vec<f64> = gr.iter().zip(vg.data()).map(|(g, w)| g * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / nd;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / nd;
                        for ((o, dh), xh) in dr.iter_mut().zip(&dxhat).zip(xr) {
                            *o += istd * (dh - mean_d - xh * mean_dx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq_len, *heads, probs, grads),
            Op::MeanPool(x, group) => {
                let d = node.value.last_dim();
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |dx| {
                    for (r, row) in dx.chunks_mut(d).enumerate() {
                        let gr = &g[(r / group) * d..][..d];
                        row.iter_mut().zip(gr).for_each(|(o, g)| *o += g * inv);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { probs, target } => {
                let vp = self.value(*probs);
                let rows = vp.rows() as f64;
                acc(*probs, &mut |d| {
                    for ((d, p), t) in d.iter_mut().zip(vp.data()).zip(target) {
                        if *t != 0.0 && *p > PROB_FLOOR {
                            *d -= g[0] * t / (p * rows);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.last_dim();
        let rows = vq.rows();
        let batch = rows / seq_len;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq_len * seq_len];
        let mut ds = vec![0.0; seq_len * seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                let at = |i: usize| (b * seq_len + i) * d + h * dh;
                for i in 0..seq_len {
                    let gi = &g[at(i)..][..dh];
                    for j in 0..seq_len {
                        let vj = &vv.data()[at(j)..][..dh];
                        dp[i * seq_len + j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        let w = p[i * seq_len + j];
                        let dvj = &mut dv[at(j)..][..dh];
                        dvj.iter_mut().zip(gi).for_each(|(o, x)| *o += w * x);
                    }
                }
                ds.iter_mut().for_each(|x| *x = 0.0);
                kernels::softmax_rows_backward(p, &dp, &mut ds, seq_len);
                for i in 0..seq_len {
                    for j in 0..seq_len {
                        let s = ds[i * seq_len + j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let (qi, kj) = (at(i), at(j));
                        for c in 0..dh {
                            dq[qi + c] += s * vk.data()[kj + c];
                            dk[kj + c] += s * vq.data()[qi + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            let buf = grads[var.0].get_or_insert_with(|| vec![0.0; local.len()]);
            buf.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
        }
    }
}

/// Eager categorical cross entropy; see [`Tape::cross_entropy`].
pub fn cross_entropy(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    if probs.shape() != onehot.shape() {
        return Err(TensorError::Dimension {
            op: "cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: onehot.shape().to_vec(),
        });
    }
    let c = probs.last_dim();
    let mut total = 0.0;
    for (r, (pr, tr)) in probs.data().chunks(c).zip(onehot.data().chunks(c)).enumerate() {
        let s: f64 = pr.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || pr.iter().any(|&p| p < 0.0) {
            return Err(TensorError::Validation(format!(
                "probability row {r} is not normalized (sum {s})"
            )));
        }
        let ones = tr.iter().filter(|&&t| t == 1.0).count();
        let zeros = tr.iter().filter(|&&t| t == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(TensorError::Validation(format!("target row {r} is not one-hot")));
        }
        total -= pr
            .iter()
            .zip(tr)
            .map(|(p, t)| t * p.clamp(PROB_FLOOR, 1.0).ln())
            .sum::<f64>();
    }
    Ok(total / probs.rows() as f64)
}
