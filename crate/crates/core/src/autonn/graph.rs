//! Reverse-mode tape. Every op pushes a node holding its forward value and
//! whatever it needs for the backward sweep; `backward` walks the tape once
//! in reverse creation order.

use super::gemm::{gemm, MatRef};
use super::{NnError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<String> },
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize, cols: Vec<f64>, geom: ConvGeom },
    ChannelBias { input: NodeId, bias: NodeId },
    Relu { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { input: NodeId },
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    LayerNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, group: usize, probs: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MaskCols { input: NodeId, mask: Vec<f64> },
    Combine { a: NodeId, wa: f64, b: NodeId, wb: f64 },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { input: NodeId, start: usize },
    InterleaveRows { parts: Vec<NodeId> },
    GroupMeanRows { input: NodeId, group: usize },
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: NodeId, target: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward/backward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; gradients are never propagated into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Free leaf that collects a gradient but is not tied to a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Binds a named parameter from the store as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, NnError> {
        let value = store.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?.clone();
        Ok(self.push(value, Op::Leaf { param: Some(name.to_string()) }, true))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Softmax attention weights recorded by an attention node, laid out
    /// `[group_index][head][query][key]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----------------------------------------------------------------- ops

    /// Cross-correlation of an NCHW input with an OIHW kernel. Out-of-range
    /// taps read the nearest edge sample (edge-clamp padding).
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        if x.rank() != 4 || k.rank() != 4 {
            return Err(mismatch(format!("conv2d needs NCHW/OIHW, got {:?} and {:?}", x.shape(), k.shape())));
        }
        if stride == 0 {
            return Err(mismatch("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c {
            return Err(mismatch(format!("conv2d input has {c} channels, kernel expects {kc}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch("conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w, o, kh, kw, oh, ow };
        let ckk = c * kh * kw;
        let plane = oh * ow;
        let mut cols = vec![0.0; n * ckk * plane];
        let xd = x.data();
        for b in 0..n {
            let colb = &mut cols[b * ckk * plane..(b + 1) * ckk * plane];
            for ci in 0..c {
                let xc = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row = (ci * kh + dy) * kw + dx;
                        let dst = &mut colb[row * plane..(row + 1) * plane];
                        for oy in 0..oh {
                            let iy = clamp_index(oy * stride + dy, pad, h);
                            let src = &xc[iy * w..(iy + 1) * w];
                            for ox in 0..ow {
                                dst[oy * ow + ox] = src[clamp_index(ox * stride + dx, pad, w)];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; n * o * plane];
        let kd = k.data();
        for b in 0..n {
            gemm(
                MatRef::row_major(kd, o, ckk),
                MatRef::row_major(&cols[b * ckk * plane..(b + 1) * ckk * plane], ckk, plane),
                &mut out[b * o * plane..(b + 1) * o * plane],
                0.0,
            );
        }
        let rg = self.rg(&[input, kernel]);
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, stride, pad, cols, geom }, rg))
    }

    /// Adds a per-channel bias to an `[N, C, ...]` tensor.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        let b = &self.nodes[bias.0].value;
        if x.rank() < 2 || b.len() != x.shape()[1] {
            return Err(mismatch(format!("bias {:?} does not match channels of {:?}", b.shape(), x.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (n * c).max(1);
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// 2×2 non-overlapping max pooling; ties route to the first index.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 4 || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
            return Err(mismatch(format!("max_pool2 needs NCHW with even H, W; got {:?}", x.shape())));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let xd = x.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let cands = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut best = cands[0];
                    for &ci in &cands[1..] {
                        if xd[ci] > xd[best] {
                            best = ci;
                        }
                    }
                    let oi = (p * oh + oy) * ow + ox;
                    out[oi] = xd[best];
                    argmax[oi] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 4 {
            return Err(mismatch("global_avg_pool needs NCHW"));
        }
        let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let data = x.data().chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// `input[N×D] · weight[D×E] + bias[E]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        if x.rank() != 2 || wt.rank() != 2 || x.shape()[1] != wt.shape()[0] || b.len() != wt.shape()[1] {
            return Err(mismatch(format!(
                "affine: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wt.shape(),
                b.shape()
            )));
        }
        let (n, d, e) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(MatRef::row_major(x.data(), n, d), MatRef::row_major(wt.data(), d, e), &mut out, 1.0);
        let value = Tensor::new(vec![n, e], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Affine { input, weight, bias }, rg))
    }

    /// Row-wise standardization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        if x.rank() != 2 || g.len() != x.shape()[1] || bt.len() != x.shape()[1] || x.shape()[1] == 0 {
            return Err(mismatch(format!("layer_norm: input {:?}, gamma {:?}", x.shape(), g.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g.data()[j] * xh + bt.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { input, gamma, beta, xhat, inv_std }, rg))
    }

    /// Scaled dot-product attention over independent groups of `group`
    /// consecutive rows. `q`, `k`, `v` are `[B·group, D]`; each head sees a
    /// contiguous `D / heads` column slice. Output heads are concatenated.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, group: usize) -> Result<NodeId, NnError> {
        let qt = &self.nodes[q.0].value;
        let kt = &self.nodes[k.0].value;
        let vt = &self.nodes[v.0].value;
        if qt.rank() != 2 || qt.shape() != kt.shape() || qt.shape() != vt.shape() {
            return Err(mismatch("attention: q, k, v must share a 2-D shape"));
        }
        let (rows, d) = (qt.shape()[0], qt.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(mismatch(format!("attention: width {d} not divisible by {heads} heads")));
        }
        if group == 0 || rows % group != 0 {
            return Err(mismatch(format!("attention: {rows} rows not divisible into groups of {group}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = rows / group;
        let mut probs = vec![0.0; groups * heads * group * group];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        for g in 0..groups {
            for h in 0..heads {
                let pbase = (g * heads + h) * group * group;
                for i in 0..group {
                    let qi = (g * group + i) * d + h * dh;
                    let prow = &mut probs[pbase + i * group..pbase + (i + 1) * group];
                    for j in 0..group {
                        let kj = (g * group + j) * d + h * dh;
                        let s: f64 = (0..dh).map(|t| qd[qi + t] * kd[kj + t]).sum();
                        prow[j] = s * scale;
                    }
                    softmax_in_place(prow);
                    let oi = (g * group + i) * d + h * dh;
                    for j in 0..group {
                        let p = prow[j];
                        let vj = (g * group + j) * d + h * dh;
                        for t in 0..dh {
                            out[oi + t] += p * vd[vj + t];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, heads, group, probs }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(mismatch(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(mismatch(format!("mul: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Multiplies column `j` of an `[N, D]` tensor by the constant `mask[j]`.
    pub fn mask_cols(&mut self, input: NodeId, mask: &[f64]) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 2 || x.shape()[1] != mask.len() {
            return Err(mismatch(format!("mask of length {} for {:?}", mask.len(), x.shape())));
        }
        let d = mask.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v * mask[i % d]).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::MaskCols { input, mask: mask.to_vec() }, rg))
    }

    /// `wa·a + wb·b`.
    pub fn combine(&mut self, a: NodeId, wa: f64, b: NodeId, wb: f64) -> Result<NodeId, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(mismatch(format!("combine: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| wa * p + wb * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Combine { a, wa, b, wb }, rg))
    }

    /// Concatenates `[N, D_i]` tensors along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = parts.first().ok_or_else(|| mismatch("concat of nothing"))?;
        let n = self.nodes[first.0].value.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(mismatch(format!("concat_cols: part {s:?} vs {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[r * wd..(r + 1) * wd]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 2 || start + len > x.shape()[1] {
            return Err(mismatch(format!("slice {start}+{len} out of {:?}", x.shape())));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SliceCols { input, start }, rg))
    }

    /// Stacks `V` tensors of shape `[N, F]` into `[N·V, F]` with row
    /// `n·V + v` taken from part `v`.
    pub fn interleave_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = parts.first().ok_or_else(|| mismatch("interleave of nothing"))?;
        let shape = self.nodes[first.0].value.shape().to_vec();
        if shape.len() != 2 || parts.iter().any(|p| self.nodes[p.0].value.shape() != shape.as_slice()) {
            return Err(mismatch("interleave_rows: parts must share a 2-D shape"));
        }
        let (n, f, nv) = (shape[0], shape[1], parts.len());
        let mut out = Vec::with_capacity(n * nv * f);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(&self.nodes[p.0].value.data()[r * f..(r + 1) * f]);
            }
        }
        let value = Tensor::new(vec![n * nv, f], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::InterleaveRows { parts: parts.to_vec() }, rg))
    }

    /// `[N·G, F] -> [N, F]` mean over each block of `G` rows.
    pub fn group_mean_rows(&mut self, input: NodeId, group: usize) -> Result<NodeId, NnError> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 2 || group == 0 || x.shape()[0] % group != 0 {
            return Err(mismatch(format!("group_mean_rows: {:?} by {group}", x.shape())));
        }
        let (rows, f) = (x.shape()[0], x.shape()[1]);
        let n = rows / group;
        let mut out = vec![0.0; n * f];
        for r in 0..rows {
            let dst = &mut out[(r / group) * f..(r / group + 1) * f];
            for (o, v) in dst.iter_mut().zip(&x.data()[r * f..(r + 1) * f]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let value = Tensor::new(vec![n, f], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GroupMeanRows { input, group }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        let x = &self.nodes[logits.0].value;
        if x.rank() != 2 || x.shape()[0] != labels.len() || labels.is_empty() {
            return Err(mismatch(format!("cross entropy: logits {:?} for {} labels", x.shape(), labels.len())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NnError::InvalidLabel { label: bad, classes: c });
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Mean squared error of every element of `pred` against `target`.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId, NnError> {
        let p = &self.nodes[pred.0].value;
        if p.len() != target.len() || target.is_empty() {
            return Err(mismatch(format!("mse: {} predictions vs {} targets", p.len(), target.len())));
        }
        let loss = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64;
        let value = Tensor::scalar(loss);
        let rg = self.rg(&[pred]);
        Ok(self.push(value, Op::Mse { pred, target: target.to_vec() }, rg))
    }

    // ------------------------------------------------------------ backward

    /// Backpropagates from a single-element node with seed gradient 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(mismatch("backward() needs a scalar; use backward_with"));
        }
        self.backward_with(loss, Tensor::scalar(1.0).reshape(self.nodes[loss.0].value.shape())?)
    }

    /// Backpropagates `seed` (same shape as the node's value) from `root`.
    pub fn backward_with(&mut self, root: NodeId, seed: Tensor) -> Result<(), NnError> {
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(mismatch("seed gradient shape differs from node value"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (id, t) in contribs {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[id.0].grad {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |id: NodeId| &self.nodes[id.0].value;
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(val(id).shape().to_vec(), data).expect("grad shape");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, kernel, stride, pad, cols, geom } => {
                let ConvGeom { n, c, h, w, o, kh, kw, oh, ow } = *geom;
                let ckk = c * kh * kw;
                let plane = oh * ow;
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; o * ckk];
                    for b in 0..n {
                        gemm(
                            MatRef::row_major(&gd[b * o * plane..(b + 1) * o * plane], o, plane),
                            MatRef::row_major(&cols[b * ckk * plane..(b + 1) * ckk * plane], ckk, plane).t(),
                            &mut dk,
                            1.0,
                        );
                    }
                    out.push((*kernel, like(*kernel, dk)));
                }
                if self.needs(*input) {
                    let kd = val(*kernel).data();
                    let mut dx = vec![0.0; n * c * h * w];
                    let mut dcols = vec![0.0; ckk * plane];
                    for b in 0..n {
                        gemm(
                            MatRef::row_major(kd, o, ckk).t(),
                            MatRef::row_major(&gd[b * o * plane..(b + 1) * o * plane], o, plane),
                            &mut dcols,
                            0.0,
                        );
                        for ci in 0..c {
                            let dxc = &mut dx[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                            for dy in 0..kh {
                                for dxo in 0..kw {
                                    let row = (ci * kh + dy) * kw + dxo;
                                    let src = &dcols[row * plane..(row + 1) * plane];
                                    for oy in 0..oh {
                                        let iy = clamp_index(oy * stride + dy, *pad, h);
                                        for ox in 0..ow {
                                            let ix = clamp_index(ox * stride + dxo, *pad, w);
                                            dxc[iy * w + ix] += src[oy * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out.push((*input, like(*input, dx)));
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.needs(*input) {
                    out.push((*input, g.clone()));
                }
                if self.needs(*bias) {
                    let s = val(*input).shape();
                    let (n, c) = (s[0], s[1]);
                    let inner = g.len() / (n * c).max(1);
                    let mut db = vec![0.0; c];
                    for (k, chunk) in gd.chunks(inner).enumerate() {
                        db[k % c] += chunk.iter().sum::<f64>();
                    }
                    out.push((*bias, like(*bias, db)));
                }
            }
            Op::Relu { input } => {
                let x = val(*input).data();
                let d = x.iter().zip(gd).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                out.push((*input, like(*input, d)));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; val(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += gd[o];
                }
                out.push((*input, like(*input, d)));
            }
            Op::GlobalAvgPool { input } => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let d = (0..val(*input).len()).map(|j| gd[j / hw] / hw as f64).collect();
                out.push((*input, like(*input, d)));
            }
            Op::Affine { input, weight, bias } => {
                let x = val(*input);
                let wt = val(*weight);
                let (n, d, e) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(MatRef::row_major(gd, n, e), MatRef::row_major(wt.data(), d, e).t(), &mut dx, 0.0);
                    out.push((*input, like(*input, dx)));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; d * e];
                    gemm(MatRef::row_major(x.data(), n, d).t(), MatRef::row_major(gd, n, e), &mut dw, 0.0);
                    out.push((*weight, like(*weight, dw)));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; e];
                    for row in gd.chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*bias, like(*bias, db)));
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let d = val(*gamma).len();
                let n = xhat.len() / d;
                let gam = val(*gamma).data();
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let dxh: Vec<f64> = (0..d).map(|j| gd[r * d + j] * gam[j]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let sum: f64 = dxh.iter().sum();
                        let dot: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] / d as f64 * (d as f64 * dxh[j] - sum - xh[j] * dot);
                        }
                    }
                    out.push((*input, like(*input, dx)));
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((*gamma, like(*gamma, dg)));
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*beta, like(*beta, db)));
                }
            }
            Op::Attention { q, k, v, heads, group, probs } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let (rows, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let (heads, group) = (*heads, *group);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; group];
                for gi in 0..rows / group {
                    for h in 0..heads {
                        let pbase = (gi * heads + h) * group * group;
                        for i in 0..group {
                            let prow = &probs[pbase + i * group..pbase + (i + 1) * group];
                            let oi = (gi * group + i) * d + h * dh;
                            for j in 0..group {
                                let vj = (gi * group + j) * d + h * dh;
                                dp[j] = (0..dh).map(|t| gd[oi + t] * vd[vj + t]).sum();
                                for t in 0..dh {
                                    dv[vj + t] += prow[j] * gd[oi + t];
                                }
                            }
                            let inner: f64 = (0..group).map(|j| dp[j] * prow[j]).sum();
                            for j in 0..group {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                let kj = (gi * group + j) * d + h * dh;
                                for t in 0..dh {
                                    dq[oi + t] += ds * kd[kj + t];
                                    dk[kj + t] += ds * qd[oi + t];
                                }
                            }
                        }
                    }
                }
                out.push((*q, like(*q, dq)));
                out.push((*k, like(*k, dk)));
                out.push((*v, like(*v, dv)));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                let (x, y) = (val(*a).data(), val(*b).data());
                out.push((*a, like(*a, gd.iter().zip(y).map(|(p, q)| p * q).collect())));
                out.push((*b, like(*b, gd.iter().zip(x).map(|(p, q)| p * q).collect())));
            }
            Op::MaskCols { input, mask } => {
                let dm = mask.len();
                let d = gd.iter().enumerate().map(|(j, v)| v * mask[j % dm]).collect();
                out.push((*input, like(*input, d)));
            }
            Op::Combine { a, wa, b, wb } => {
                out.push((*a, like(*a, gd.iter().map(|v| v * wa).collect())));
                out.push((*b, like(*b, gd.iter().map(|v| v * wb).collect())));
            }
            Op::ConcatCols { parts } => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let wd = val(*p).shape()[1];
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(n * wd);
                        for r in 0..n {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + wd]);
                        }
                        out.push((*p, like(*p, d)));
                    }
                    offset += wd;
                }
            }
            Op::SliceCols { input, start } => {
                let s = val(*input).shape();
                let (n, d) = (s[0], s[1]);
                let len = g.shape()[1];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                out.push((*input, like(*input, dx)));
            }
            Op::InterleaveRows { parts } => {
                let f = g.shape()[1];
                let nv = parts.len();
                let n = g.shape()[0] / nv;
                for (pv, p) in parts.iter().enumerate() {
                    if !self.needs(*p) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(n * f);
                    for r in 0..n {
                        let row = r * nv + pv;
                        d.extend_from_slice(&gd[row * f..(row + 1) * f]);
                    }
                    out.push((*p, like(*p, d)));
                }
            }
            Op::GroupMeanRows { input, group } => {
                let f = g.shape()[1];
                let rows = val(*input).shape()[0];
                let mut d = vec![0.0; rows * f];
                for r in 0..rows {
                    for j in 0..f {
                        d[r * f + j] = gd[(r / group) * f + j] / *group as f64;
                    }
                }
                out.push((*input, like(*input, d)));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let c = val(*logits).shape()[1];
                let n = labels.len() as f64;
                let scale = gd[0] / n;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, like(*logits, d)));
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let scale = 2.0 * gd[0] / target.len() as f64;
                let d = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                out.push((*pred, like(*pred, d)));
            }
        }
        out
    }

    /// Gradients of every bound parameter, keyed by parameter name. A
    /// parameter bound more than once has its gradients summed.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut acc: std::collections::BTreeMap<String, Tensor> = Default::default();
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(name) }, Some(g)) = (&node.op, &node.grad) {
                match acc.get_mut(name) {
                    Some(t) => t.add_assign(g),
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        acc.into_iter().collect()
    }

    /// Hash of every piecewise-linear branch decision taken in the forward
    /// pass (relu signs, max-pool winners). Two evaluations with equal
    /// signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[input.0].value.data() {
                        h.write_u64((v > 0.0) as u64);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.iter().for_each(|&a| h.write_u64(a as u64)),
                _ => {}
            }
        }
        h.finish()
    }
}

fn clamp_index(padded: usize, pad: usize, len: usize) -> usize {
    (padded as isize - pad as isize).clamp(0, len as isize - 1) as usize
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Row-wise softmax of an `[N, C]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap_or(&1);
    let mut data = logits.data().to_vec();
    data.chunks_mut(c.max(1)).for_each(softmax_in_place);
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
