// SPDX-License-Identifier: Apache-2.0

//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] evaluates every operation eagerly and records it. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! writes the gradient of every parameter into a [`ParameterStore`].
//! Inference paths build the same graph and simply never call `backward`,
//! so training and serving share one forward implementation.

use crate::error::{Result, SndError};
use crate::params::ParameterStore;
use crate::tensor::{gelu, gelu_grad, gemm, normalize_row, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a stacked `(batch * seq) x (n_head * d_kv)` matrix splits into
/// sequences and heads for attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub n_head: usize,
    pub d_kv: usize,
    /// `batch * seq` flags; `false` marks padding that no query may attend to.
    pub mask: Vec<bool>,
}

impl AttnLayout {
    pub fn unmasked(batch: usize, seq: usize, n_head: usize, d_kv: usize) -> Self {
        Self {
            batch,
            seq,
            n_head,
            d_kv,
            mask: vec![true; batch * seq],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mask.len() != self.batch * self.seq {
            return Err(SndError::Dimension(format!(
                "mask has {} entries for {} x {} positions",
                self.mask.len(),
                self.batch,
                self.seq
            )));
        }
        for b in 0..self.batch {
            if !self.mask[b * self.seq..(b + 1) * self.seq].iter().any(|&m| m) {
                return Err(SndError::DegenerateMask(b));
            }
        }
        Ok(())
    }
}

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    MeanSquaredError(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// A trainable leaf bound to `name` in `store`.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| SndError::Contract(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), false, self.value(b), false)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(SndError::Dimension(format!(
                "bias of length {} for {} columns",
                bv.len(),
                xv.cols()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(SndError::Dimension(format!(
                "layer norm over {d} features with gain {} / bias {}",
                g.len(),
                b.len()
            )));
        }
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let (row, s) = normalize_row(xv.row(i), eps);
            inv_std.push(s);
            xhat.row_mut(i).copy_from_slice(&row);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = g.data()[j] * row[j] + b.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention for every sequence and head in `layout`.
    /// Output columns are the heads concatenated in order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        layout.validate()?;
        let AttnLayout {
            batch,
            seq,
            n_head,
            d_kv,
            ..
        } = layout;
        let width = n_head * d_kv;
        for t in [q, k, v] {
            let val = self.value(t);
            if val.rows() != batch * seq || val.cols() != width {
                return Err(SndError::Dimension(format!(
                    "attention operand is {}x{}, expected {}x{}",
                    val.rows(),
                    val.cols(),
                    batch * seq,
                    width
                )));
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let scale = 1.0 / (d_kv as f64).sqrt();
        let mut probs = vec![0.0; batch * n_head * seq * seq];
        let mut out = Tensor::zeros(&[batch * seq, width]);
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let mask = &layout.mask[b * seq..(b + 1) * seq];
            for h in 0..n_head {
                let c0 = h * d_kv;
                for i in 0..seq {
                    let qi = &qv.row(b * seq + i)[c0..c0 + d_kv];
                    let mut valid = Vec::with_capacity(seq);
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &kv.row(b * seq + j)[c0..c0 + d_kv];
                            valid.push(scale * crate::tensor::dot(qi, kj));
                        }
                    }
                    softmax_in_place(&mut valid);
                    let mut it = valid.into_iter();
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = if mask[j] { it.next().unwrap_or(0.0) } else { 0.0 };
                    }
                    let base = ((b * n_head + h) * seq + i) * seq;
                    probs[base..base + seq].copy_from_slice(&scores);
                    let orow = &mut out.row_mut(b * seq + i)[c0..c0 + d_kv];
                    for (j, &p) in scores.iter().enumerate() {
                        if p != 0.0 {
                            let vj = &vv.row(b * seq + j)[c0..c0 + d_kv];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Rows `idx` of `table`, in order. Gradients scatter-add back.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(SndError::Dimension(format!(
                "row {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let out = t.select_rows(&idx);
        Ok(self.push(out, Op::Gather { table, idx }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let n = diff.len().max(1) as f64;
        let out = Tensor::scalar(diff.data().iter().map(|d| d * d).sum::<f64>() / n);
        Ok(self.push(out, Op::MeanSquaredError(a, b)))
    }

    /// Mean binary cross-entropy of a column of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(SndError::Dimension(format!(
                "{} logits for {} targets",
                lv.len(),
                targets.len()
            )));
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }))
    }

    /// Back-propagates from the scalar `loss`. Every parameter in `store`
    /// receives a gradient; those the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(SndError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, self.value(*b), true)?;
                    let gb = gemm(self.value(*a), true, &g, false)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::AddRow(x, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gb)?;
                    accumulate(&mut grads, *b, gb)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Gelu(x) => {
                    let gx = g.zip_map(self.value(*x), |go, xv| go * gelu_grad(xv))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Relu(x) => {
                    let gx =
                        g.zip_map(self.value(*x), |go, xv| if xv > 0.0 { go } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = g.cols();
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for i in 0..g.rows() {
                        let (gi, xh) = (g.row(i), xhat.row(i));
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            ggain[j] += gi[j] * xh[j];
                            gbias[j] += gi[j];
                            dxhat[j] = gi[j] * gv.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gain, Tensor::new(gs, ggain)?)?;
                    accumulate(&mut grads, *bias, Tensor::new(bs, gbias)?)?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, layout, probs, &g);
                    accumulate(&mut grads, *q, gq)?;
                    accumulate(&mut grads, *k, gk)?;
                    accumulate(&mut grads, *v, gv)?;
                }
                Op::Gather { table, idx } => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(self.value(*x).shape(), s))?;
                }
                Op::MeanSquaredError(a, b) => {
                    let s = g.data()[0];
                    let diff = self.value(*a).sub(self.value(*b))?;
                    let n = diff.len().max(1) as f64;
                    let ga = diff.scale(2.0 * s / n);
                    accumulate(&mut grads, *b, ga.scale(-1.0))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::BceWithLogits { logits, targets } => {
                    let s = g.data()[0];
                    let n = targets.len().max(1) as f64;
                    let lv = self.value(*logits);
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| s * (sigmoid(z) - y) / n)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let (seq, d_kv) = (layout.seq, layout.d_kv);
        let scale = 1.0 / (d_kv as f64).sqrt();
        let mut dp = vec![0.0; seq];
        for b in 0..layout.batch {
            for h in 0..layout.n_head {
                let c0 = h * d_kv;
                for i in 0..seq {
                    let base = ((b * layout.n_head + h) * seq + i) * seq;
                    let p = &probs[base..base + seq];
                    let go = &g.row(b * seq + i)[c0..c0 + d_kv];
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vv.row(b * seq + j)[c0..c0 + d_kv];
                        dp[j] = crate::tensor::dot(go, vj);
                        let gvj = &mut gv.row_mut(b * seq + j)[c0..c0 + d_kv];
                        for (o, x) in gvj.iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = qv.row(b * seq + i)[c0..c0 + d_kv].to_vec();
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = scale * p[j] * (dp[j] - weighted);
                        let kj = &kv.row(b * seq + j)[c0..c0 + d_kv];
                        let gqi = &mut gq.row_mut(b * seq + i)[c0..c0 + d_kv];
                        for (o, x) in gqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let gkj = &mut gk.row_mut(b * seq + j)[c0..c0 + d_kv];
                        for (o, x) in gkj.iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
