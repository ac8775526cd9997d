use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Reshape {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Narrow {
        input: usize,
        start: usize,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Euclidean {
        pred: usize,
        target: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Linear { .. } => "fully_connected",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Euclidean { .. } => "euclidean_loss",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Relu { input }
            | Op::MaxPool { input, .. }
            | Op::Reshape { input }
            | Op::Narrow { input, .. } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Euclidean { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order since
/// an op can only reference nodes that already exist. `backward` walks the
/// tape in exact reverse.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, param: Option<String>, leaf_grad: bool) -> Var {
        let requires_grad = leaf_grad || op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None, true)
    }

    /// Named trainable leaf; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Some(name.to_string()), true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs().into_iter().map(Var).collect()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d bias", &ws, &bs));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[0];
        let ho = conv_out(h, pad, stride)?;
        let wo = conv_out(w, pad, stride)?;
        let geom = ConvGeom { c, h, w, ho, wo, stride, pad };

        let x = self.nodes[input.0].value.data();
        let wt = self.nodes[weight.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * k * plane];
        if plane > 0 {
            out.par_chunks_mut(k * plane).enumerate().for_each(|(i, o)| {
                let mut cols = vec![T::zero(); c * 9 * plane];
                im2col(&x[i * c * h * w..(i + 1) * c * h * w], &geom, &mut cols);
                for (kk, row) in o.chunks_mut(plane).enumerate() {
                    row.fill(b[kk]);
                }
                T::gemm(false, false, k, c * 9, plane, wt, &cols, T::one(), o);
            });
        }
        let value = Tensor::new([n, k, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                pad,
            },
            None,
            false,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(value, Op::Relu { input: input.0 }, None, false)
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::Invalid(format!("maxpool2d expects rank 4, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Invalid(format!("maxpool2d needs even spatial dims, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.nodes[input.0].value.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = base + 2 * oy * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { input: input.0, argmax }, None, false))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("fully_connected", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("fully_connected bias", &ws, &bs));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let b = self.nodes[bias.0].value.data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        T::gemm(
            false,
            false,
            n,
            d,
            m,
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            None,
            false,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[input.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input: input.0 }, None, false))
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(input, &shape)
    }

    /// Concatenate 2-D tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let n = self.shape(first)[0];
        let mut width = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            width += s[1];
        }
        let mut out = Vec::with_capacity(n * width);
        for row in 0..n {
            for &v in inputs {
                out.extend_from_slice(self.nodes[v.0].value.row(row));
            }
        }
        let value = Tensor::new([n, width], out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
            },
            None,
            false,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Invalid(format!("narrow {start}..{} out of range for {s:?}", start + len)));
        }
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(s[0] * len);
        for row in 0..s[0] {
            out.extend_from_slice(&x.row(row)[start..start + len]);
        }
        let value = Tensor::new([s[0], len], out)?;
        Ok(self.push(value, Op::Narrow { input: input.0, start }, None, false))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (n, m) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Invalid(format!("label {bad} out of range for {m} classes")));
        }
        let z = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); n * m];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let p = &mut probs[i * m..(i + 1) * m];
            let mut sum = T::zero();
            for (pj, &zj) in p.iter_mut().zip(row) {
                *pj = (zj - max).exp();
                sum = sum + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / sum;
            }
            total = total + sum.ln() - (row[label] - max);
        }
        let loss = if n == 0 { T::zero() } else { total / T::from_f64(n as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            None,
            false,
        ))
    }

    /// `(1/2N) Σ ‖pred_i − target_i‖²`. No gradient flows into `target`.
    pub fn euclidean_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let ps = self.shape(pred);
        let ts = self.shape(target);
        if ps != ts || ps.len() != 2 {
            return Err(Error::shape("euclidean_loss", ps, ts));
        }
        let n = ps[0];
        let p = self.nodes[pred.0].value.data();
        let t = self.nodes[target.0].value.data();
        let sq: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = if n == 0 { T::zero() } else { sq / T::from_f64(2.0 * n as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Euclidean {
                pred: pred.0,
                target: target.0,
            },
            None,
            false,
        ))
    }

    /// Reverse pass from a scalar node. Clears any gradients from a previous
    /// pass first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gout) = node.value.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, gout);
        }
        Ok(())
    }

    /// Gradients of every named parameter reached by the last backward pass.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for node in &self.nodes {
            let Some(name) = &node.param else { continue };
            let g = node
                .value
                .grad
                .clone()
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            match out.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => {
                    out.insert(name.clone(), Tensor::new(node.value.shape(), g).expect("same shape"));
                }
            }
        }
        out
    }

    /// Hash of every relu sign and pooling argmax. Two forward passes with the
    /// same signature took the same piecewise-linear branch.
    pub fn activation_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[*input].value.data() {
                        mix((v > T::zero()) as u64);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                _ => {}
            }
        }
        h
    }
}

fn conv_out(size: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < 3 || (padded - 3) % stride != 0 {
        return Err(Error::Invalid(format!(
            "conv2d output size ({size} + 2*{pad} - 3)/{stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - 3) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * plane..][..plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[c * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<T: Real>(node: &mut Node<T>) -> Option<&mut Vec<T>> {
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.value.grad.get_or_insert_with(|| vec![T::zero(); n]))
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, gout: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Relu { input } => {
            let x = nodes[*input].value.data().to_vec();
            if let Some(gx) = grad_buf(&mut nodes[*input]) {
                add_into(gx, x.iter().zip(gout).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }));
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(gx) = grad_buf(&mut nodes[*input]) {
                for (&a, &g) in argmax.iter().zip(gout) {
                    gx[a as usize] = gx[a as usize] + g;
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(gx) = grad_buf(&mut nodes[*input]) {
                add_into(gx, gout.iter().copied());
            }
        }
        Op::Narrow { input, start } => {
            let width = nodes[*input].value.shape()[1];
            let len = node.value.shape()[1];
            if let Some(gx) = grad_buf(&mut nodes[*input]) {
                for (row, g) in gout.chunks(len.max(1)).enumerate() {
                    add_into(&mut gx[row * width + start..][..len], g.iter().copied());
                }
            }
        }
        Op::Concat { inputs } => {
            let n = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &i in inputs {
                let width = nodes[i].value.shape()[1];
                if let Some(gx) = grad_buf(&mut nodes[i]) {
                    for row in 0..n {
                        add_into(&mut gx[row * width..][..width], gout[row * total + offset..][..width].iter().copied());
                    }
                }
                offset += width;
            }
        }
        Op::SoftmaxCe { logits, labels, probs } => {
            let m = nodes[*logits].value.shape()[1];
            let scale = gout[0] / T::from_f64(labels.len().max(1) as f64);
            if let Some(gx) = grad_buf(&mut nodes[*logits]) {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..m {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gx[i * m + j] = gx[i * m + j] + (probs[i * m + j] - onehot) * scale;
                    }
                }
            }
        }
        Op::Euclidean { pred, target } => {
            let n = nodes[*pred].value.shape()[0];
            let scale = gout[0] / T::from_f64(n.max(1) as f64);
            let diff: Vec<T> = nodes[*pred]
                .value
                .data()
                .iter()
                .zip(nodes[*target].value.data())
                .map(|(&p, &t)| (p - t) * scale)
                .collect();
            if let Some(gx) = grad_buf(&mut nodes[*pred]) {
                add_into(gx, diff);
            }
        }
        Op::Linear { input, weight, bias } => {
            let (n, d) = (nodes[*input].value.shape()[0], nodes[*input].value.shape()[1]);
            let m = nodes[*weight].value.shape()[1];
            if nodes[*input].requires_grad {
                let w = nodes[*weight].value.data().to_vec();
                let gx = grad_buf(&mut nodes[*input]).expect("requires grad");
                T::gemm(false, true, n, m, d, gout, &w, T::one(), gx);
            }
            if nodes[*weight].requires_grad {
                let x = nodes[*input].value.data().to_vec();
                let gw = grad_buf(&mut nodes[*weight]).expect("requires grad");
                T::gemm(true, false, d, n, m, &x, gout, T::one(), gw);
            }
            if let Some(gb) = grad_buf(&mut nodes[*bias]) {
                for row in gout.chunks(m.max(1)) {
                    add_into(gb, row.iter().copied());
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => conv_backward(nodes, *input, *weight, *bias, *stride, *pad, node.value.shape(), gout),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    nodes: &mut [Node<T>],
    input: usize,
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    gout: &[T],
) {
    let xs = nodes[input].value.shape().to_vec();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let geom = ConvGeom { c, h, w, ho, wo, stride, pad };
    let plane = ho * wo;
    let c9 = c * 9;
    let want_x = nodes[input].requires_grad;
    let want_w = nodes[weight].requires_grad;
    let want_b = nodes[bias].requires_grad;
    let x = nodes[input].value.data();
    let wt = nodes[weight].value.data();

    // Per-sample partials, reduced below in sample order so the result does
    // not depend on how rayon schedules the work.
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let go = &gout[i * k * plane..(i + 1) * k * plane];
            let mut cols = vec![T::zero(); c9 * plane];
            let mut gw = Vec::new();
            if want_w {
                im2col(&x[i * c * h * w..(i + 1) * c * h * w], &geom, &mut cols);
                gw = vec![T::zero(); k * c9];
                T::gemm(false, true, k, plane, c9, go, &cols, T::zero(), &mut gw);
            }
            let gb = if want_b {
                go.chunks(plane.max(1)).map(|r| r.iter().copied().sum()).collect()
            } else {
                Vec::new()
            };
            let mut gx = Vec::new();
            if want_x {
                T::gemm(true, false, c9, k, plane, wt, go, T::zero(), &mut cols);
                gx = vec![T::zero(); c * h * w];
                col2im(&cols, &geom, &mut gx);
            }
            (gw, gb, gx)
        })
        .collect();

    if want_x {
        let gx = grad_buf(&mut nodes[input]).expect("requires grad");
        for (i, (_, _, part)) in per_sample.iter().enumerate() {
            add_into(&mut gx[i * c * h * w..(i + 1) * c * h * w], part.iter().copied());
        }
    }
    if want_w {
        let gw = grad_buf(&mut nodes[weight]).expect("requires grad");
        for (part, _, _) in &per_sample {
            add_into(gw, part.iter().copied());
        }
    }
    if want_b {
        let gb = grad_buf(&mut nodes[bias]).expect("requires grad");
        for (_, part, _) in &per_sample {
            add_into(gb, part.iter().copied());
        }
    }
}
