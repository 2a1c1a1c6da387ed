//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward calls append nodes in topological order; `backward` walks the tape
//! in reverse, so gradient accumulation order is fixed and runs are
//! reproducible. Values are f32 throughout.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;
use crate::rng::counter_uniform;

pub const LAYER_NORM_EPS: f32 = 1e-5;

const GELU_C0: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C1: f32 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    MatMul(NodeId, NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<(f32, f32)> },
    Gelu(NodeId),
    Conv1d { x: NodeId, w: NodeId, b: NodeId, kernel: usize, stride: usize, pad_left: usize },
    Embed { table: NodeId, ids: Vec<u32> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        /// Softmax rows before dropout, (n_heads * lq, lk) row-major.
        weights: Vec<f32>,
        /// Inverted-dropout mask over the weight rows, when training.
        drop_mask: Option<Vec<f32>>,
    },
    CrossEntropyMean { logits: NodeId, targets: Vec<u32>, positions: Vec<usize>, probs: Vec<f32> },
    MsePositions { pred: NodeId, targets: Vec<f32>, positions: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. One tape per forward graph; `backward` may be called once
/// per recorded scalar loss.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable log-sum-exp of a row; shared by the loss op and the scoring path
/// so that the two agree bit for bit.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0f32;
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

// c += a (m x k) . b (k x n)
fn mm_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c += a (m x n) . b^T, b is (k x n); c is (m x k)
fn mm_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            crow[p] += s;
        }
    }
}

// c += a^T . b, a is (m x k), b is (m x n); c is (k x n)
fn mm_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn softmax_rows(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            s += e;
        }
        let inv = 1.0 / s;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Record a constant input (no parameter slot; gradients are computed but
    /// never exported).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// Record a parameter leaf. Repeated requests for the same parameter on
    /// one tape return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let slot = params.slot(name)?;
        if let Some(&id) = self.param_nodes.get(&slot) {
            return Ok(id);
        }
        let id = self.push(params.value_at(slot).clone(), Op::Leaf { param: Some(slot) });
        self.param_nodes.insert(slot, id);
        Ok(id)
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.dims2()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Broadcast add of a (1 x n) row onto every row of an (m x n) matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        let (rm, rn) = self.dims2(row)?;
        if rm != 1 || rn != n {
            return Err(Error::shape(format!("add_row: ({m}x{n}) + ({rm}x{rn})")));
        }
        let rdata = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rdata[j];
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a)?;
        let (kb, n) = self.dims2(b)?;
        if ka != kb {
            return Err(Error::shape(format!("matmul: ({m}x{ka}) . ({kb}x{n})")));
        }
        let mut data = vec![0.0f32; m * n];
        mm_acc(&mut data, self.value(a).data(), self.value(b).data(), m, ka, n);
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a)?;
        let data = softmax_rows(self.value(a).data(), m, n);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Per-row layer normalization followed by a broadcast affine transform.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        let (gm, gn) = self.dims2(gain)?;
        let (bm, bn) = self.dims2(bias)?;
        if gm != 1 || bm != 1 || gn != n || bn != n {
            return Err(Error::shape(format!(
                "layer_norm: x ({m}x{n}), gain ({gm}x{gn}), bias ({bm}x{bn})"
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![0.0f32; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            stats.push((mean, inv_std));
            let orow = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, stats }))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let u = GELU_C0 * (v + GELU_C1 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(x)))
    }

    /// 1-D convolution over time with same-padding.
    ///
    /// `x` is (T x c_in), `w` is (c_out x kernel*c_in) with tap-major layout
    /// `w[o, j*c_in + ci]`, `b` is (1 x c_out). Output is (ceil(T/stride) x c_out).
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (t_in, c_in) = self.dims2(x)?;
        let (c_out, kc) = self.dims2(w)?;
        let (bm, bn) = self.dims2(b)?;
        if kc != kernel * c_in || bm != 1 || bn != c_out {
            return Err(Error::shape(format!(
                "conv1d: x ({t_in}x{c_in}), w ({c_out}x{kc}), b ({bm}x{bn}), kernel {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid_input("conv1d: stride must be positive"));
        }
        let t_out = t_in.div_ceil(stride);
        let pad_total = ((t_out - 1) * stride + kernel).saturating_sub(t_in);
        let pad_left = pad_total / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0f32; t_out * c_out];
        for t in 0..t_out {
            let orow = &mut data[t * c_out..(t + 1) * c_out];
            orow.copy_from_slice(bd);
            for j in 0..kernel {
                let src = (t * stride + j) as isize - pad_left as isize;
                if src < 0 || src >= t_in as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                for o in 0..c_out {
                    let wrow = &wd[o * kc + j * c_in..o * kc + (j + 1) * c_in];
                    let mut s = 0.0f32;
                    for ci in 0..c_in {
                        s += xrow[ci] * wrow[ci];
                    }
                    orow[o] += s;
                }
            }
        }
        let t = Tensor::matrix(t_out, c_out, data)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, kernel, stride, pad_left }))
    }

    /// Gather rows of an embedding table. Ids must be below the table height.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::invalid_input("embed: empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::invalid_input(format!(
                "embed: id {bad} out of range for vocabulary of size {v}"
            )));
        }
        let td = self.value(table).data();
        let mut data = vec![0.0f32; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(t, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values. No masking of any kind: every query position
    /// attends to every key position.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> Result<NodeId> {
        self.attention_dropped(q, k, v, n_heads, None)
    }

    /// Attention with inverted dropout on the probability rows, keyed like
    /// [`Tape::dropout`]. `drop` is (rate, seed, site, step).
    pub fn attention_dropped(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        drop: Option<(f32, u64, u64, u64)>,
    ) -> Result<NodeId> {
        let (lq, d) = self.dims2(q)?;
        let (lk, dk) = self.dims2(k)?;
        let (lv, dv) = self.dims2(v)?;
        if dk != d || dv != d || lv != lk {
            return Err(Error::shape(format!(
                "attention: q ({lq}x{d}), k ({lk}x{dk}), v ({lv}x{dv})"
            )));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape(format!(
                "attention: model dim {d} not divisible by {n_heads} heads"
            )));
        }
        let hd = d / n_heads;
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let drop_mask: Option<Vec<f32>> = match drop {
            None => None,
            Some((p, _, _, _)) if p == 0.0 => None,
            Some((p, seed, site, step)) => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::invalid_input(format!(
                        "attention dropout rate {p} outside [0,1)"
                    )));
                }
                let keep_scale = 1.0 / (1.0 - p);
                Some(
                    (0..n_heads * lq * lk)
                        .map(|i| {
                            if counter_uniform(seed, site, step, i as u64) >= p {
                                keep_scale
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            }
        };
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0f32; lq * d];
        let mut weights = vec![0.0f32; n_heads * lq * lk];
        let mut scores = vec![0.0f32; lk];
        for h in 0..n_heads {
            let off = h * hd;
            for i in 0..lq {
                let qrow = &qd[i * d + off..i * d + off + hd];
                for (t, sc) in scores.iter_mut().enumerate() {
                    let krow = &kd[t * d + off..t * d + off + hd];
                    let mut s = 0.0f32;
                    for c in 0..hd {
                        s += qrow[c] * krow[c];
                    }
                    *sc = s * inv_sqrt;
                }
                let row_base = (h * lq + i) * lk;
                let wrow = &mut weights[row_base..row_base + lk];
                let m = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let mut ssum = 0.0f32;
                for (wv, &s) in wrow.iter_mut().zip(scores.iter()) {
                    let e = (s - m).exp();
                    *wv = e;
                    ssum += e;
                }
                let inv = 1.0 / ssum;
                for wv in wrow.iter_mut() {
                    *wv *= inv;
                }
                let orow = &mut out[i * d + off..i * d + off + hd];
                for (t, &wv) in wrow.iter().enumerate() {
                    let used = match &drop_mask {
                        Some(mask) => wv * mask[row_base + t],
                        None => wv,
                    };
                    if used == 0.0 {
                        continue;
                    }
                    let vrow = &vd[t * d + off..t * d + off + hd];
                    for c in 0..hd {
                        orow[c] += used * vrow[c];
                    }
                }
            }
        }
        let t = Tensor::matrix(lq, d, out)?;
        Ok(self.push(t, Op::Attention { q, k, v, n_heads, weights, drop_mask }))
    }

    /// Cached attention weights of a node created by [`Tape::attention`],
    /// as (n_heads, queries, keys) row-major data.
    pub fn attention_weights(&self, id: NodeId) -> Option<(usize, usize, usize, &[f32])> {
        match &self.nodes[id.0].op {
            Op::Attention { q, k, n_heads, weights, .. } => {
                let lq = self.nodes[q.0].value.dims2().ok()?.0;
                let lk = self.nodes[k.0].value.dims2().ok()?.0;
                Some((*n_heads, lq, lk, weights.as_slice()))
            }
            _ => None,
        }
    }

    /// Negative log-likelihood averaged over the selected positions:
    /// `-(1/|P|) sum_{p in P} log softmax(logits[p])[targets[p]]`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[u32], positions: &[usize]) -> Result<NodeId> {
        let (l, v) = self.dims2(logits)?;
        if positions.is_empty() {
            return Err(Error::invalid_input("cross_entropy: empty position set"));
        }
        if targets.len() != l {
            return Err(Error::shape(format!(
                "cross_entropy: {l} logit rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::invalid_input(format!("cross_entropy: position {p} out of range")));
        }
        if let Some(&t) = positions.iter().map(|&p| &targets[p]).find(|&&t| t as usize >= v) {
            return Err(Error::invalid_input(format!("cross_entropy: target {t} out of range")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; positions.len() * v];
        let mut total = 0.0f32;
        for (r, &p) in positions.iter().enumerate() {
            let row = &ld[p * v..(p + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[targets[p] as usize];
            let prow = &mut probs[r * v..(r + 1) * v];
            for (pr, &lv) in prow.iter_mut().zip(row.iter()) {
                *pr = (lv - lse).exp();
            }
        }
        let loss = total / positions.len() as f32;
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
                probs,
            },
        ))
    }

    /// Mean squared error over selected rows of an (L x 1) prediction column.
    pub fn mse_at_positions(&mut self, pred: NodeId, targets: &[f32], positions: &[usize]) -> Result<NodeId> {
        let (l, c) = self.dims2(pred)?;
        if c != 1 {
            return Err(Error::shape(format!("mse: expected (L x 1), got ({l}x{c})")));
        }
        if positions.is_empty() || positions.len() != targets.len() {
            return Err(Error::invalid_input(format!(
                "mse: {} positions vs {} targets",
                positions.len(),
                targets.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::invalid_input(format!("mse: position {p} out of range")));
        }
        let pd = self.value(pred).data();
        let mut total = 0.0f32;
        for (&p, &t) in positions.iter().zip(targets.iter()) {
            let d = pd[p] - t;
            total += d * d;
        }
        let loss = total / positions.len() as f32;
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::MsePositions { pred, targets: targets.to_vec(), positions: positions.to_vec() },
        ))
    }

    /// Inverted dropout with a counter-based mask, so a (seed, site, step)
    /// triple always produces the same mask regardless of call order.
    pub fn dropout(&mut self, x: NodeId, p: f32, seed: u64, site: u64, step: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid_input(format!("dropout rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|i| if counter_uniform(seed, site, step, i as u64) >= p { keep_scale } else { 0.0 })
            .collect();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f32> {
        let len = self.nodes[id.0].value.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse pass from a scalar loss with upstream gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeding the loss gradient with `seed_grad` (used to weight
    /// per-utterance losses when accumulating a batch).
    pub fn backward_scaled(&mut self, loss: NodeId, seed_grad: f32) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid_input(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_from(loss, &[seed_grad])
    }

    /// Reverse pass from any node with an explicit upstream cotangent of the
    /// same shape.
    pub fn backward_from(&mut self, node: NodeId, upstream: &[f32]) -> Result<()> {
        if upstream.len() != self.nodes[node.0].value.len() {
            return Err(Error::shape(format!(
                "backward_from: upstream has {} values, node has {}",
                upstream.len(),
                self.nodes[node.0].value.len()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grad_buf(node).copy_from_slice(upstream);

        for idx in (0..=node.0).rev() {
            let dy = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &dy)?;
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, dy: &[f32]) -> Result<()> {
        // Collect the shapes we need before borrowing grad buffers mutably.
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for (g, d) in self.grad_buf(a).iter_mut().zip(dy) {
                    *g += d;
                }
                for (g, d) in self.grad_buf(b).iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let (m, n) = self.dims2(a)?;
                for (g, d) in self.grad_buf(a).iter_mut().zip(dy) {
                    *g += d;
                }
                let rg = self.grad_buf(row);
                for i in 0..m {
                    for j in 0..n {
                        rg[j] += dy[i * n + j];
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                for ((g, d), bv) in self.grad_buf(a).iter_mut().zip(dy).zip(bd.iter()) {
                    *g += d * bv;
                }
                for ((g, d), av) in self.grad_buf(b).iter_mut().zip(dy).zip(ad.iter()) {
                    *g += d * av;
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                for (g, d) in self.grad_buf(a).iter_mut().zip(dy) {
                    *g += d * c;
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims2(a)?;
                let n = self.dims2(b)?.1;
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                mm_nt_acc(self.grad_buf(a), dy, &bd, m, n, k);
                mm_tn_acc(self.grad_buf(b), &ad, dy, m, k, n);
            }
            Op::Softmax(a) => {
                let a = *a;
                let (m, n) = self.dims2(a)?;
                let yd = self.nodes[idx].value.data().to_vec();
                let ga = self.grad_buf(a);
                for i in 0..m {
                    let yrow = &yd[i * n..(i + 1) * n];
                    let drow = &dy[i * n..(i + 1) * n];
                    let dot: f32 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                    let grow = &mut ga[i * n..(i + 1) * n];
                    for j in 0..n {
                        grow[j] += yrow[j] * (drow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let stats = stats.clone();
                let (m, n) = self.dims2(x)?;
                let xd = self.nodes[x.0].value.data().to_vec();
                let gd = self.nodes[gain.0].value.data().to_vec();
                {
                    let gx = self.grad_buf(x);
                    for i in 0..m {
                        let (mean, inv_std) = stats[i];
                        let xrow = &xd[i * n..(i + 1) * n];
                        let drow = &dy[i * n..(i + 1) * n];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = drow[j] * gd[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        let grow = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = drow[j] * gd[j];
                            grow[j] += inv_std * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                {
                    let gg = self.grad_buf(gain);
                    for i in 0..m {
                        let (mean, inv_std) = stats[i];
                        for j in 0..n {
                            let xhat = (xd[i * n + j] - mean) * inv_std;
                            gg[j] += dy[i * n + j] * xhat;
                        }
                    }
                }
                {
                    let gb = self.grad_buf(bias);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += dy[i * n + j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let xd = self.nodes[x.0].value.data().to_vec();
                let gx = self.grad_buf(x);
                for (j, (&v, &d)) in xd.iter().zip(dy.iter()).enumerate() {
                    let u = GELU_C0 * (v + GELU_C1 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v);
                    let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    gx[j] += d * deriv;
                }
            }
            Op::Conv1d { x, w, b, kernel, stride, pad_left } => {
                let (x, w, b) = (*x, *w, *b);
                let (kernel, stride, pad_left) = (*kernel, *stride, *pad_left);
                let (t_in, c_in) = self.dims2(x)?;
                let (c_out, kc) = self.dims2(w)?;
                let t_out = t_in.div_ceil(stride);
                let xd = self.nodes[x.0].value.data().to_vec();
                let wd = self.nodes[w.0].value.data().to_vec();
                {
                    let gb = self.grad_buf(b);
                    for t in 0..t_out {
                        for o in 0..c_out {
                            gb[o] += dy[t * c_out + o];
                        }
                    }
                }
                {
                    let gw = self.grad_buf(w);
                    for t in 0..t_out {
                        for j in 0..kernel {
                            let src = (t * stride + j) as isize - pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                            for o in 0..c_out {
                                let dv = dy[t * c_out + o];
                                let grow = &mut gw[o * kc + j * c_in..o * kc + (j + 1) * c_in];
                                for ci in 0..c_in {
                                    grow[ci] += dv * xrow[ci];
                                }
                            }
                        }
                    }
                }
                {
                    let gx = self.grad_buf(x);
                    for t in 0..t_out {
                        for j in 0..kernel {
                            let src = (t * stride + j) as isize - pad_left as isize;
                            if src < 0 || src >= t_in as isize {
                                continue;
                            }
                            let grow = &mut gx[src as usize * c_in..(src as usize + 1) * c_in];
                            for o in 0..c_out {
                                let dv = dy[t * c_out + o];
                                let wrow = &wd[o * kc + j * c_in..o * kc + (j + 1) * c_in];
                                for ci in 0..c_in {
                                    grow[ci] += dv * wrow[ci];
                                }
                            }
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.dims2(table)?.1;
                let gt = self.grad_buf(table);
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for c in 0..d {
                        grow[c] += dy[r * d + c];
                    }
                }
            }
            Op::Attention { q, k, v, n_heads, weights, drop_mask } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let weights = weights.clone();
                let drop_mask = drop_mask.clone();
                let (lq, d) = self.dims2(q)?;
                let lk = self.dims2(k)?.0;
                let hd = d / n_heads;
                let inv_sqrt = 1.0 / (hd as f32).sqrt();
                let qd = self.nodes[q.0].value.data().to_vec();
                let kd = self.nodes[k.0].value.data().to_vec();
                let vd = self.nodes[v.0].value.data().to_vec();
                let mut gq = vec![0.0f32; lq * d];
                let mut gk = vec![0.0f32; lk * d];
                let mut gv = vec![0.0f32; lk * d];
                let mut dw = vec![0.0f32; lk];
                for h in 0..n_heads {
                    let off = h * hd;
                    for i in 0..lq {
                        let dout = &dy[i * d + off..i * d + off + hd];
                        let row_base = (h * lq + i) * lk;
                        let wrow = &weights[row_base..row_base + lk];
                        // With dropout, the mixed probabilities were
                        // u[t] = mask[t] * w[t]: dv[t] += u[t] * dout and
                        // dL/dw[t] = mask[t] * <dout, v[t]>.
                        for t in 0..lk {
                            let m = drop_mask.as_ref().map_or(1.0, |mk| mk[row_base + t]);
                            let vrow = &vd[t * d + off..t * d + off + hd];
                            let gvrow = &mut gv[t * d + off..t * d + off + hd];
                            let mut s = 0.0f32;
                            for c in 0..hd {
                                gvrow[c] += m * wrow[t] * dout[c];
                                s += dout[c] * vrow[c];
                            }
                            dw[t] = m * s;
                        }
                        // softmax backward on the row
                        let dot: f32 = wrow.iter().zip(dw.iter()).map(|(w, d)| w * d).sum();
                        let qrow = &qd[i * d + off..i * d + off + hd];
                        let gqrow_base = i * d + off;
                        for t in 0..lk {
                            let ds = wrow[t] * (dw[t] - dot) * inv_sqrt;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kd[t * d + off..t * d + off + hd];
                            let gkrow = &mut gk[t * d + off..t * d + off + hd];
                            for c in 0..hd {
                                gq[gqrow_base + c] += ds * krow[c];
                                gkrow[c] += ds * qrow[c];
                            }
                        }
                    }
                }
                for (g, d) in self.grad_buf(q).iter_mut().zip(gq) {
                    *g += d;
                }
                for (g, d) in self.grad_buf(k).iter_mut().zip(gk) {
                    *g += d;
                }
                for (g, d) in self.grad_buf(v).iter_mut().zip(gv) {
                    *g += d;
                }
            }
            Op::CrossEntropyMean { logits, targets, positions, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let positions = positions.clone();
                let probs = probs.clone();
                let v = self.dims2(logits)?.1;
                let scale = dy[0] / positions.len() as f32;
                let gl = self.grad_buf(logits);
                for (r, &p) in positions.iter().enumerate() {
                    let prow = &probs[r * v..(r + 1) * v];
                    let grow = &mut gl[p * v..(p + 1) * v];
                    for j in 0..v {
                        grow[j] += scale * prow[j];
                    }
                    grow[targets[p] as usize] -= scale;
                }
            }
            Op::MsePositions { pred, targets, positions } => {
                let pred = *pred;
                let targets = targets.clone();
                let positions = positions.clone();
                let pd = self.nodes[pred.0].value.data().to_vec();
                let scale = dy[0] * 2.0 / positions.len() as f32;
                let gp = self.grad_buf(pred);
                for (&p, &t) in positions.iter().zip(targets.iter()) {
                    gp[p] += scale * (pd[p] - t);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                for ((g, d), m) in self.grad_buf(x).iter_mut().zip(dy).zip(mask.iter()) {
                    *g += d * m;
                }
            }
        }
        Ok(())
    }

    /// Add the gradients accumulated on parameter leaves into the parameter
    /// set's gradient buffers.
    pub fn export_grads(&self, params: &mut ParamSet) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(slot) } = node.op {
                if let Some(g) = &self.grads[idx] {
                    let buf = params.grad_at_mut(slot);
                    for (b, v) in buf.iter_mut().zip(g.iter()) {
                        *b += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 1.0, 1.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f32> = logits.iter().map(|v| v + 37.5).collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(logits));
        let b = tape.constant(Tensor::row(shifted));
        let ya = tape.softmax(a).unwrap();
        let yb = tape.softmax(b).unwrap();
        for (x, y) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f32 * 0.37 - 2.0).collect()).unwrap());
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        for r in 0..3 {
            let s: f32 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(d[r * 4..(r + 1) * 4].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_pre_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![3.5; 8]));
        let g = tape.constant(Tensor::row(vec![1.0; 8]));
        let b = tape.constant(Tensor::row(vec![0.0; 8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(4, v, vec![0.25; 4 * v]).unwrap());
        let loss = tape.cross_entropy_mean(logits, &[0, 1, 2, 3], &[0, 2]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - (v as f32).ln()).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_sharp_logits_approach_zero() {
        let mut tape = Tape::new();
        let mut data = vec![-50.0f32; 5];
        data[3] = 50.0;
        let logits = tape.constant(Tensor::matrix(1, 5, data).unwrap());
        let loss = tape.cross_entropy_mean(logits, &[3], &[0]).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(
            tape.cross_entropy_mean(logits, &[0, 1], &[]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn product_rule_for_scalars() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.constant(Tensor::scalar(-1.5));
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap()[0], -1.5);
        assert_eq!(tape.grad(y).unwrap()[0], 3.0);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_output_length_is_ceil_div() {
        let mut tape = Tape::new();
        for t_in in [1usize, 3, 4, 5, 97, 98, 100] {
            let x = tape.constant(Tensor::matrix(t_in, 2, vec![0.1; t_in * 2]).unwrap());
            let w = tape.constant(Tensor::matrix(3, 10, vec![0.05; 30]).unwrap());
            let b = tape.constant(Tensor::row(vec![0.0; 3]));
            let y = tape.conv1d(x, w, b, 5, 2).unwrap();
            assert_eq!(tape.value(y).dims2().unwrap().0, t_in.div_ceil(2));
        }
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::matrix(4, 2, vec![0.0; 8]).unwrap());
        assert!(matches!(tape.embed(table, &[0, 4]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f32).sin()).collect()).unwrap());
        let k = tape.constant(Tensor::matrix(5, 4, (0..20).map(|i| (i as f32).cos()).collect()).unwrap());
        let v = tape.constant(Tensor::matrix(5, 4, (0..20).map(|i| i as f32 * 0.1).collect()).unwrap());
        let y = tape.attention(q, k, v, 2).unwrap();
        let (h, lq, lk, w) = tape.attention_weights(y).unwrap();
        assert_eq!((h, lq, lk), (2, 3, 5));
        for row in 0..h * lq {
            let s: f32 = w[row * lk..(row + 1) * lk].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_node() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let y = tape.dropout(x, 0.0, 1, 2, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_is_replayable() {
        let mut t1 = Tape::new();
        let x1 = t1.constant(Tensor::row(vec![1.0; 64]));
        let y1 = t1.dropout(x1, 0.5, 9, 4, 2).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(Tensor::row(vec![1.0; 64]));
        let y2 = t2.dropout(x2, 0.5, 9, 4, 2).unwrap();
        assert_eq!(t1.value(y1).data(), t2.value(y2).data());
    }
}
