//! Recorded-tape reverse-mode differentiation over a fixed set of layer kinds.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass. Every
//! operation appends a node holding its output value and whatever it needs to run
//! its backward rule. [`Tape::backward`] then walks the nodes in reverse and
//! returns [`Gradients`] keyed by parameter.

use std::collections::HashMap;

use rayon::prelude::*;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{dot, matmul, matmul_at_acc, matmul_bt, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Targets for [`Tape::cross_entropy`].
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class index per row; `None` rows are masked out of the loss.
    Hard(Vec<Option<usize>>),
    /// A full target distribution per row, row-major `[rows, classes]`.
    Soft(Vec<f64>),
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Param(ParamId),
    Input,
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        transposed: bool,
    },
    Add(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Targets,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable parameter. Repeated calls for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Records a constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Gathers rows of `table` (`[vocab, width]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-d, got {:?}", t.shape())));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidInput(format!("embedding id {id} >= {rows}")));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), width], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// `x · W + b` with `W: [in, out]`, or `x · Wᵀ + b` with `W: [out, in]` when `transposed`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<Var> {
        let (m, k) = self.value(x).matrix_dims();
        let ws = self.value(w).shape();
        if ws.len() != 2 {
            return Err(Error::Shape(format!("linear weight must be 2-d, got {ws:?}")));
        }
        let (w_in, n) = if transposed { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
        if w_in != k {
            return Err(Error::Shape(format!("linear input width {k} vs weight {ws:?}")));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = if transposed { matmul_bt(xv, wv, m, k, n) } else { matmul(xv, wv, m, k, n) };
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(Error::Shape(format!("bias of length {} for width {n}", bv.len())));
            }
            for row in out.chunks_mut(n) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Linear { x, w, b, transposed }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.value(x).matrix_dims();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != d || b.len() != d {
            return Err(Error::Shape(format!("layer norm width {d} vs gain/bias {}/{}", g.len(), b.len())));
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; m * d];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![m, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Multi-head causal self-attention over packed projections.
    ///
    /// `qkv` is `[batch * seq, 3 * width]` with queries, keys and values laid out
    /// side by side; the result is `[batch * seq, width]`. Position `i` of a sequence
    /// attends to positions `0..=i` of the same sequence only.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.value(qkv).matrix_dims();
        if rows != batch * seq || cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over [{rows}, {cols}] with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let per_batch = |(b, (out_b, probs_b)): (usize, (&mut [f64], &mut [f64]))| {
            let base = b * seq;
            let mut scores = vec![0.0; seq];
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                for i in 0..seq {
                    let q = &qv[(base + i) * cols + qo..(base + i) * cols + qo + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &qv[(base + j) * cols + ko..(base + j) * cols + ko + dh];
                        scores[j] = dot(q, k) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for s in &mut scores[..=i] {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_row = &mut probs_b[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                    let o_row = &mut out_b[i * d + h * dh..i * d + (h + 1) * dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        p_row[j] = p;
                        let v = &qv[(base + j) * cols + vo..(base + j) * cols + vo + dh];
                        for (o, vv) in o_row.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                }
            }
        };
        if batch > 0 && seq > 0 {
            out.par_chunks_mut(seq * d)
                .zip(probs.par_chunks_mut(heads * seq * seq))
                .enumerate()
                .for_each(per_batch);
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::Attention { qkv, batch, seq, heads, probs }))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.matrix_dims();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::InvalidInput(format!("row {r} out of {m}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    /// Mean softmax cross-entropy over the non-masked rows of `logits` (`[rows, classes]`).
    /// Returns a single-element tensor; an all-masked batch yields zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets) -> Result<Var> {
        let (m, c) = self.value(logits).matrix_dims();
        match &targets {
            Targets::Hard(t) => {
                if t.len() != m {
                    return Err(Error::Shape(format!("{} targets for {m} rows", t.len())));
                }
                if let Some(bad) = t.iter().flatten().find(|&&k| k >= c) {
                    return Err(Error::InvalidInput(format!("target class {bad} >= {c}")));
                }
            }
            Targets::Soft(t) => {
                if t.len() != m * c {
                    return Err(Error::Shape(format!("soft targets of length {} for [{m}, {c}]", t.len())));
                }
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..m {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
            match &targets {
                Targets::Hard(t) => {
                    if let Some(k) = t[r] {
                        total += lse - row[k];
                        count += 1;
                    }
                }
                Targets::Soft(t) => {
                    let tr = &t[r * c..(r + 1) * c];
                    total += tr.iter().zip(row).map(|(tk, l)| tk * (lse - l)).sum::<f64>();
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets, probs, count }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before a forward pass was recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse pass from `out` with an explicit upstream gradient of the same size.
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before a forward pass was recorded".into()));
        }
        if self.value(out).len() != seed.len() {
            return Err(Error::Shape(format!(
                "seed gradient of length {} for value of length {}",
                seed.len(),
                self.value(out).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        let mut result = Gradients::empty(self.params);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(id) => result.accumulate(self.params, *id, &g),
                Op::Input => {}
                Op::Embedding { table, ids } => {
                    let width = self.value(*table).shape()[1];
                    let n = self.value(*table).len();
                    let tg = slot(&mut grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..width {
                            tg[id * width + c] += g[r * width + c];
                        }
                    }
                }
                Op::Linear { x, w, b, transposed } => {
                    let (m, k) = self.value(*x).matrix_dims();
                    let n = g.len() / m.max(1);
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    let dx = if *transposed { matmul(&g, wv, m, n, k) } else { matmul_bt(&g, wv, m, n, k) };
                    add_into(slot(&mut grads, *x, m * k), &dx);
                    let wg = slot(&mut grads, *w, k * n);
                    if *transposed {
                        matmul_at_acc(wg, &g, xv, m, n, k);
                    } else {
                        matmul_at_acc(wg, xv, &g, m, k, n);
                    }
                    if let Some(b) = b {
                        let bg = slot(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            add_into(bg, row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let xg = slot(&mut grads, *x, g.len());
                    for ((o, gi), &xi) in xg.iter_mut().zip(&g).zip(xv) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (m, d) = self.value(*x).matrix_dims();
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; m * d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..m {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dgain[c] += gr[c] * hr[c];
                            dbias[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for c in 0..d {
                            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    add_into(slot(&mut grads, *x, m * d), &dx);
                    add_into(slot(&mut grads, *gain, d), &dgain);
                    add_into(slot(&mut grads, *bias, d), &dbias);
                }
                Op::Attention { qkv, batch, seq, heads, probs } => {
                    let dqkv = attention_backward(self.value(*qkv).data(), &g, probs, *batch, *seq, *heads);
                    add_into(slot(&mut grads, *qkv, dqkv.len()), &dqkv);
                }
                Op::SelectRows { x, rows } => {
                    let (m, n) = self.value(*x).matrix_dims();
                    let xg = slot(&mut grads, *x, m * n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut xg[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let (m, c) = self.value(*logits).matrix_dims();
                    let lg = slot(&mut grads, *logits, m * c);
                    if *count > 0 {
                        let f = g[0] / *count as f64;
                        for r in 0..m {
                            let pr = &probs[r * c..(r + 1) * c];
                            let out = &mut lg[r * c..(r + 1) * c];
                            match targets {
                                Targets::Hard(t) => {
                                    if let Some(k) = t[r] {
                                        for (o, p) in out.iter_mut().zip(pr) {
                                            *o += f * p;
                                        }
                                        out[k] -= f;
                                    }
                                }
                                Targets::Soft(t) => {
                                    let tr = &t[r * c..(r + 1) * c];
                                    let mass: f64 = tr.iter().sum();
                                    for ((o, p), tk) in out.iter_mut().zip(pr).zip(tr) {
                                        *o += f * (p * mass - tk);
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let xg = slot(&mut grads, *x, n);
                    xg.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
        Ok(result)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn attention_backward(qkv: &[f64], g: &[f64], probs: &[f64], batch: usize, seq: usize, heads: usize) -> Vec<f64> {
    let cols = qkv.len() / (batch * seq).max(1);
    let d = cols / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    if batch == 0 || seq == 0 {
        return dqkv;
    }
    dqkv.par_chunks_mut(seq * cols).enumerate().for_each(|(b, dq_b)| {
        let base = b * seq;
        let mut dp = vec![0.0; seq];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            for i in 0..seq {
                let go = &g[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                let p_row = &probs[((b * heads + h) * seq + i) * seq..((b * heads + h) * seq + i + 1) * seq];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let v = &qkv[(base + j) * cols + vo..(base + j) * cols + vo + dh];
                    dp[j] = dot(go, v);
                    weighted += p_row[j] * dp[j];
                    let dv = &mut dq_b[j * cols + vo..j * cols + vo + dh];
                    for (o, gg) in dv.iter_mut().zip(go) {
                        *o += p_row[j] * gg;
                    }
                }
                let q = &qkv[(base + i) * cols + qo..(base + i) * cols + qo + dh];
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &qkv[(base + j) * cols + ko..(base + j) * cols + ko + dh];
                    for c in 0..dh {
                        dq_b[i * cols + qo + c] += ds * k[c];
                        dq_b[j * cols + ko + c] += ds * q[c];
                    }
                }
            }
        }
    });
    dqkv
}
