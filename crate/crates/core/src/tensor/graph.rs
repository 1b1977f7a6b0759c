use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamStore};
use super::{Shape4, Tensor4D};
use crate::error::{Error, Result};
use crate::loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2x(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Per-output-item spatial multiplier broadcast over channels; a batch-1
    /// input is replicated once per mask.
    MaskMul {
        input: NodeId,
        masks: Vec<f64>,
    },
    /// `out[i] = sum_t w_t * in[idx_t]` over a single input.
    SparseLinear {
        input: NodeId,
        taps: Vec<Vec<(usize, f64)>>,
    },
    Gather {
        sources: Vec<NodeId>,
        index: Vec<(usize, usize)>,
    },
    Objectness {
        logits: NodeId,
        positives: Vec<usize>,
        negatives: Vec<usize>,
    },
    SmoothL1 {
        pred: NodeId,
        target: Vec<f64>,
        scale: f64,
    },
    BceLogits {
        logits: NodeId,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4D,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation. Nodes are appended in evaluation order,
/// so the node list is already a topological order.
#[derive(Debug, Default)]
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

    fn push(&mut self, value: Tensor4D, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Fingerprint of the branch taken at every non-smooth op: ReLU input
    /// signs and max-pool winners. Equal fingerprints put two evaluations on
    /// the same smooth piece of the function.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for &v in self.nodes[input.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor4D) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. a cached feature map).
    pub fn variable(&mut self, value: Tensor4D) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let value = store.tensor(idx).clone();
        Ok(self.push(value, Op::Param(idx), true))
    }

    /// Parameter leaf whose gradient is not tracked.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.constant(store.tensor(idx).clone()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor4D {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.nodes[id.0].value;
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape()));
        }
        Ok(v.data()[0])
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).shape();
        let [c_out, c_in, kh, kw] = self.value(weight).shape();
        if c_in != c || kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", &[n, c, h, w], &[c_out, c_in, kh, kw]));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and dilation must be >= 1".into(),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs.iter().product::<usize>() != c_out {
                return Err(Error::shape("conv2d bias", &bs, &[c_out]));
            }
        }
        let k = kh;
        let (ho, wo) = match (
            ConvGeom::out_extent(h, k, stride, dilation, padding),
            ConvGeom::out_extent(w, k, stride, dilation, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape("conv2d receptive field", &[n, c, h, w], &[c_out, c_in, kh, kw]))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            dilation,
            padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            &geom,
            n,
            c_out,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let rg = self.rg(input) || self.rg(weight) || bias.map_or(false, |b| self.rg(b));
        let value = Tensor4D::from_vec([n, c_out, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor4D::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let data = v.data().iter().map(|&x| loss::sigmoid(x)).collect();
        let value = Tensor4D::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize, padding: usize) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument("maxpool kernel and stride must be >= 1".into()));
        }
        if padding >= kernel {
            return Err(Error::InvalidArgument("maxpool padding must be smaller than the kernel".into()));
        }
        let v = self.value(input);
        let shape = v.shape();
        let ho = ConvGeom::out_extent(shape[2], kernel, stride, 1, padding);
        let wo = ConvGeom::out_extent(shape[3], kernel, stride, 1, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape("maxpool2d", &shape, &[kernel, kernel]));
        };
        let (out, argmax) = kernels::maxpool_forward(shape, v.data(), kernel, stride, padding, ho, wo);
        let value = Tensor4D::from_vec([shape[0], shape[1], ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn upsample_nearest2x(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let [n, c, h, w] = v.shape();
        let (h2, w2) = (2 * h, 2 * w);
        let src = v.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(plane * h2 + y) * w2 + x] = src[(plane * h + y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor4D::from_vec([n, c, h2, w2], out).expect("shape");
        let rg = self.rg(input);
        self.push(value, Op::Upsample2x(input), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", &va.shape(), &vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor4D::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", &va.shape(), &vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor4D::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Multiplies `input` by one `h×w` mask per output item, broadcasting over
    /// channels. `masks` holds `k` planes back to back; the input batch must
    /// be `k` or `1` (replicated).
    pub fn mask_mul(&mut self, input: NodeId, masks: Vec<f64>) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).shape();
        let plane = h * w;
        if plane == 0 || masks.len() % plane != 0 || masks.is_empty() {
            return Err(Error::shape("mask_mul", &[n, c, h, w], &[masks.len()]));
        }
        let k = masks.len() / plane;
        if n != k && n != 1 {
            return Err(Error::shape("mask_mul", &[n, c, h, w], &[k, 1, h, w]));
        }
        let src = self.value(input).data();
        let item = c * plane;
        let mut out = vec![0.0; k * item];
        for b in 0..k {
            let s = if n == 1 { 0 } else { b };
            let m = &masks[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off_in = s * item + ch * plane;
                let off_out = b * item + ch * plane;
                for p in 0..plane {
                    out[off_out + p] = src[off_in + p] * m[p];
                }
            }
        }
        let value = Tensor4D::from_vec([k, c, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaskMul { input, masks }, rg))
    }

    pub fn sparse_linear(&mut self, input: NodeId, taps: Vec<Vec<(usize, f64)>>, out_shape: Shape4) -> Result<NodeId> {
        if out_shape.iter().product::<usize>() != taps.len() {
            return Err(Error::shape("sparse_linear", &out_shape, &[taps.len()]));
        }
        let src = self.value(input).data();
        if taps.iter().flatten().any(|&(i, _)| i >= src.len()) {
            return Err(Error::InvalidArgument("sparse_linear tap out of range".into()));
        }
        let out = taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * src[i]).sum())
            .collect();
        let value = Tensor4D::from_vec(out_shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SparseLinear { input, taps }, rg))
    }

    /// Picks flat entries `(source position, flat index)` from several nodes
    /// into a `(1, 1, 1, len)` vector.
    pub fn gather(&mut self, sources: Vec<NodeId>, index: Vec<(usize, usize)>) -> Result<NodeId> {
        let mut out = Vec::with_capacity(index.len());
        for &(s, i) in &index {
            let src = sources
                .get(s)
                .ok_or_else(|| Error::InvalidArgument("gather source out of range".into()))?;
            let data = self.value(*src).data();
            out.push(
                *data
                    .get(i)
                    .ok_or_else(|| Error::InvalidArgument("gather index out of range".into()))?,
            );
        }
        let value = Tensor4D::from_vec([1, 1, 1, out.len()], out)?;
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(value, Op::Gather { sources, index }, rg))
    }

    /// Class-balanced objectness loss over sigmoid probabilities of `logits`
    /// (flat), with separate positive and negative normalization.
    pub fn objectness_loss(&mut self, logits: NodeId, positives: Vec<usize>, negatives: Vec<usize>) -> Result<NodeId> {
        let z = self.value(logits).data();
        if positives.iter().chain(&negatives).any(|&i| i >= z.len()) {
            return Err(Error::InvalidArgument("objectness index out of range".into()));
        }
        let pos: Vec<f64> = positives.iter().map(|&i| loss::sigmoid(z[i])).collect();
        let neg: Vec<f64> = negatives.iter().map(|&i| loss::sigmoid(z[i])).collect();
        let value = Tensor4D::scalar(loss::objectness_from_probs(&pos, &neg));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::Objectness {
                logits,
                positives,
                negatives,
            },
            rg,
        ))
    }

    /// `scale * sum_i smooth_l1(pred_i - target_i)`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: Vec<f64>, scale: f64) -> Result<NodeId> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::shape("smooth_l1", &p.shape(), &[target.len()]));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(&target)
            .map(|(a, b)| loss::smooth_l1(a - b))
            .sum();
        let value = Tensor4D::scalar(scale * s);
        let rg = self.rg(pred);
        Ok(self.push(value, Op::SmoothL1 { pred, target, scale }, rg))
    }

    /// `sum_i weight_i * bce(sigmoid(logit_i), target_i)`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Vec<f64>, weight: Vec<f64>) -> Result<NodeId> {
        let z = self.value(logits);
        if z.numel() != target.len() || z.numel() != weight.len() {
            return Err(Error::shape("bce_with_logits", &z.shape(), &[target.len(), weight.len()]));
        }
        let s: f64 = z
            .data()
            .iter()
            .zip(&target)
            .zip(&weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&zi, &t), &w)| w * loss::bce_from_prob(loss::sigmoid(zi), t))
            .sum();
        let value = Tensor4D::scalar(s);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceLogits { logits, target, weight }, rg))
    }

    /// Reverse pass from a scalar root. Gradients accumulate into the grad
    /// slot of every node that requires one.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let shape = self.value(root).shape();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.nodes[root.0].value.set_grad(Some(vec![1.0]));
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = node.value.grad() else { continue };
            backward_node(&node.op, &node.value, dout, before);
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients) {
        for node in &self.nodes {
            if let (Op::Param(idx), Some(g)) = (&node.op, node.value.grad()) {
                grads.accumulate(*idx, g);
            }
        }
    }
}

fn input_grad<'a>(nodes: &'a mut [Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    let n = &mut nodes[id.0];
    n.requires_grad.then(|| n.value.grad_mut_or_zero())
}

fn backward_node(op: &Op, out: &Tensor4D, dout: &[f64], nodes: &mut [Node]) {
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let [batch, c_out, _, _] = out.shape();
            let x = nodes[input.0].value.data().to_vec();
            let wv = nodes[weight.0].value.data().to_vec();
            let mut dx = nodes[input.0].requires_grad.then(|| vec![0.0; x.len()]);
            let mut dw = nodes[weight.0].requires_grad.then(|| vec![0.0; wv.len()]);
            let mut db = bias.and_then(|b| nodes[b.0].requires_grad.then(|| vec![0.0; c_out]));
            kernels::conv2d_backward(
                geom,
                batch,
                c_out,
                &x,
                &wv,
                dout,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, g) in [(Some(*input), dx), (Some(*weight), dw), (*bias, db)] {
                if let (Some(id), Some(g)) = (id, g) {
                    if let Some(acc) = input_grad(nodes, id) {
                        axpy(acc, &g);
                    }
                }
            }
        }
        Op::Relu(input) => {
            let x = nodes[input.0].value.data().to_vec();
            if let Some(acc) = input_grad(nodes, *input) {
                for ((a, &g), &xi) in acc.iter_mut().zip(dout).zip(&x) {
                    if xi > 0.0 {
                        *a += g;
                    }
                }
            }
        }
        Op::Sigmoid(input) => {
            if let Some(acc) = input_grad(nodes, *input) {
                for ((a, &g), &s) in acc.iter_mut().zip(dout).zip(out.data()) {
                    *a += g * s * (1.0 - s);
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(acc) = input_grad(nodes, *input) {
                for (&g, &i) in dout.iter().zip(argmax) {
                    acc[i] += g;
                }
            }
        }
        Op::Upsample2x(input) => {
            let [n, c, h2, w2] = out.shape();
            let (h, w) = (h2 / 2, w2 / 2);
            if let Some(acc) = input_grad(nodes, *input) {
                for plane in 0..n * c {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            acc[(plane * h + y / 2) * w + x / 2] += dout[(plane * h2 + y) * w2 + x];
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for id in [a, b] {
                if let Some(acc) = input_grad(nodes, *id) {
                    axpy(acc, dout);
                }
            }
        }
        Op::Mul(a, b) => {
            let va = nodes[a.0].value.data().to_vec();
            let vb = nodes[b.0].value.data().to_vec();
            if let Some(acc) = input_grad(nodes, *a) {
                for ((x, &g), &y) in acc.iter_mut().zip(dout).zip(&vb) {
                    *x += g * y;
                }
            }
            if let Some(acc) = input_grad(nodes, *b) {
                for ((x, &g), &y) in acc.iter_mut().zip(dout).zip(&va) {
                    *x += g * y;
                }
            }
        }
        Op::MaskMul { input, masks } => {
            let [k, c, h, w] = out.shape();
            let n_in = nodes[input.0].value.shape()[0];
            let plane = h * w;
            let item = c * plane;
            if let Some(acc) = input_grad(nodes, *input) {
                for b in 0..k {
                    let s = if n_in == 1 { 0 } else { b };
                    let m = &masks[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let off_in = s * item + ch * plane;
                        let off_out = b * item + ch * plane;
                        for p in 0..plane {
                            acc[off_in + p] += dout[off_out + p] * m[p];
                        }
                    }
                }
            }
        }
        Op::SparseLinear { input, taps } => {
            if let Some(acc) = input_grad(nodes, *input) {
                for (t, &g) in taps.iter().zip(dout) {
                    for &(i, w) in t {
                        acc[i] += w * g;
                    }
                }
            }
        }
        Op::Gather { sources, index } => {
            for (&(s, i), &g) in index.iter().zip(dout) {
                if let Some(acc) = input_grad(nodes, sources[s]) {
                    acc[i] += g;
                }
            }
        }
        Op::Objectness {
            logits,
            positives,
            negatives,
        } => {
            let g = dout[0];
            let z = nodes[logits.0].value.data().to_vec();
            if let Some(acc) = input_grad(nodes, *logits) {
                // d/dz of -log(clamp(sigmoid z)) is -(1 - p) off the clamp, 0 on it.
                if !positives.is_empty() {
                    let scale = g / positives.len() as f64;
                    for &i in positives {
                        let p = loss::sigmoid(z[i]);
                        if p > loss::PROB_EPS && p < 1.0 - loss::PROB_EPS {
                            acc[i] -= scale * (1.0 - p);
                        }
                    }
                }
                if !negatives.is_empty() {
                    let scale = g / negatives.len() as f64;
                    for &j in negatives {
                        let p = loss::sigmoid(z[j]);
                        if p > loss::PROB_EPS && p < 1.0 - loss::PROB_EPS {
                            acc[j] += scale * p;
                        }
                    }
                }
            }
        }
        Op::SmoothL1 { pred, target, scale } => {
            let p = nodes[pred.0].value.data().to_vec();
            if let Some(acc) = input_grad(nodes, *pred) {
                for ((a, &pi), &t) in acc.iter_mut().zip(&p).zip(target) {
                    *a += dout[0] * scale * loss::smooth_l1_grad(pi - t);
                }
            }
        }
        Op::BceLogits { logits, target, weight } => {
            let z = nodes[logits.0].value.data().to_vec();
            if let Some(acc) = input_grad(nodes, *logits) {
                for i in 0..z.len() {
                    if weight[i] == 0.0 {
                        continue;
                    }
                    let p = loss::sigmoid(z[i]);
                    if p > loss::PROB_EPS && p < 1.0 - loss::PROB_EPS {
                        acc[i] += dout[0] * weight[i] * (p - target[i]);
                    }
                }
            }
        }
    }
}

fn axpy(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
