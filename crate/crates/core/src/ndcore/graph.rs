//! Define-by-run reverse-mode differentiation over batched tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate breakage of a local derivative rule, used by gradient-check
/// negative controls.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Sigmoid derivative computed as `σ` instead of `σ(1−σ)`.
    GateDerivative,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Gap(Var),
    Concat(Var, Var),
    ChannelScale {
        a: Var,
        w: Var,
        gate: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter slot `index`; zero when the parameter was not
    /// reachable from the loss.
    pub fn param(&self, index: usize) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for &(node, p) in &self.params {
            if p != index {
                continue;
            }
            let g = self.grads[node].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[node]));
            match &mut out {
                Some(acc) => acc.add_assign(&g),
                None => out = Some(g),
            }
        }
        out
    }

    /// Dense gradients for parameter slots `0..count`.
    pub fn params_dense(&self, shapes: &[&[usize]]) -> Vec<Tensor> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| self.param(i).unwrap_or_else(|| Tensor::zeros(s)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: GradFault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Activation pattern (`input > 0`) of every ReLU in evaluation order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.value(a).data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(index);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            ta.zip_map(tb, op, f)
        } else if tb.rank() == 0 {
            let s = tb.item();
            Ok(ta.map(|x| f(x, s)))
        } else {
            Err(Error::shape(op, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `[B×N] + [N]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_row_bias", sa, sb));
        }
        let n = sb[0];
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRowBias(a, bias), ng))
    }

    /// `[B×C×…] + [C]` broadcast over batch and spatial positions.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() < 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("add_channel_bias", sa, sb));
        }
        let c = sb[0];
        let spatial: usize = sa[2..].iter().product();
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(spatial.max(1)).enumerate() {
            let add = b[i % c];
            for x in chunk {
                *x += add;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddChannelBias(a, bias), ng))
    }

    /// Batched 2-D cross-correlation: `[B×C×H×W] ⋆ [F×C×kh×kw] → [B×F×H′×W′]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::shape("conv2d", &si, &sk));
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            });
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let img = c * h * w;
        let mut cols = vec![0.0; b * rows * ncols];
        let mut out = vec![0.0; b * f * ncols];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        for s in 0..b {
            let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
            kernels::im2col(&x[s * img..(s + 1) * img], &geom, col);
            kernels::gemm(
                f,
                rows,
                ncols,
                k,
                false,
                col,
                false,
                0.0,
                &mut out[s * f * ncols..(s + 1) * f * ncols],
            );
        }
        let ng = self.ng(input) || self.ng(kernel);
        let value = Tensor::new(vec![b, f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom, cols }, ng))
    }

    /// Global average pool over every axis after the channel axis:
    /// `[B×C×…] → [B×C]`; a `[B×C]` input passes through unchanged.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s.iter().product::<usize>() == 0 {
            return Err(Error::Empty { op: "global_avg_pool" });
        }
        let spatial: usize = s[2..].iter().product();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![s[0], s[1]], data)?, Op::Gap(a), ng))
    }

    /// Concatenate along the last axis: `[C] ⧺ [C′]` or `[B×C] ⧺ [B×C′]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = (sa.len() == 1 && sb.len() == 1) || (sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0]);
        if !ok {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (rows, ca, cb) = if sa.len() == 1 { (1, sa[0], sb[0]) } else { (sa[0], sa[1], sb[1]) };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let shape = if sa.len() == 1 { vec![ca + cb] } else { vec![rows, ca + cb] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(a, b), ng))
    }

    /// Gate a feature map channel-wise by `2·σ(w)`.
    ///
    /// `a` is `[B×C×…]`; `w` is either per-sample `[B×C]` or shared `[C]`.
    pub fn channel_scale(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        let shared = sw.len() == 1;
        let ok = sa.len() >= 2
            && match sw.len() {
                1 => sw[0] == sa[1],
                2 => sw[0] == sa[0] && sw[1] == sa[1],
                _ => false,
            };
        if !ok {
            return Err(Error::shape("channel_scale", &sa, &sw));
        }
        let (b, c) = (sa[0], sa[1]);
        let spatial: usize = sa[2..].iter().product();
        let gate: Vec<f64> = self.value(w).data().iter().map(|&x| 2.0 * kernels::sigmoid(x)).collect();
        let mut out = self.value(a).clone();
        for s in 0..b {
            for ch in 0..c {
                let factor = if shared { gate[ch] } else { gate[s * c + ch] };
                let start = (s * c + ch) * spatial;
                for x in &mut out.data_mut()[start..start + spatial] {
                    *x *= factor;
                }
            }
        }
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(out, Op::ChannelScale { a, w, gate }, ng))
    }

    /// Batch normalization over batch and spatial positions of each channel.
    ///
    /// With `running = None` the batch's own statistics are used and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: Option<(&[f64], &[f64])>) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let n = (b * spatial) as f64;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, chunk) in xv.chunks(spatial).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                for m in &mut mean {
                    *m /= n;
                }
                for (i, chunk) in xv.chunks(spatial).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                for v in &mut var {
                    *v /= n;
                }
                let unbiased = var.iter().map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v }).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (chunk, (xh, o))) in xv
            .chunks(spatial)
            .zip(xhat.chunks_mut(spatial).zip(out.chunks_mut(spatial)))
            .enumerate()
        {
            let ch = i % c;
            for ((v, xh), o) in chunk.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + be[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = self.push(
            Tensor::new(s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            ng,
        );
        Ok((var_out, stats))
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                detail: format!("logits {s:?} with {} labels", labels.len()),
            });
        }
        let (b, k) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::Empty {
                op: "softmax_cross_entropy",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (r, row) in self.value(logits).data().chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let params = self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (i, p))).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of a broadcast second operand: reduce to a scalar if needed.
    fn reduce_to(&self, v: Var, g: Tensor) -> Tensor {
        if self.value(v).rank() == 0 && g.rank() != 0 {
            Tensor::scalar(g.sum())
        } else {
            g
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = self.reduce_to(*b, g.clone());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = self.reduce_to(*b, g.map(|v| -v));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = if vb.rank() == 0 && va.rank() != 0 {
                        let s = vb.item();
                        g.map(|v| v * s)
                    } else {
                        g.zip_map(vb, "mul", |x, y| x * y).expect("shape checked in forward")
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = g.zip_map(va, "mul", |x, y| x * y).expect("shape checked in forward");
                    let gb = self.reduce_to(*b, gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).expect("same length"));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let faulty = self.fault == Some(GradFault::GateDerivative);
                let ga = g
                    .zip_map(&node.value, "sigmoid", |g, s| if faulty { g * s } else { g * s * (1.0 - s) })
                    .expect("same shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("m×k"));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut gb);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).expect("k×n"));
                }
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::AddChannelBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*bias) {
                    let c = self.value(*bias).len();
                    let spatial: usize = g.shape()[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(spatial.max(1)).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                let b = self.value(*input).shape()[0];
                let ks = self.value(*kernel).shape().to_vec();
                let f = ks[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if self.ng(*kernel) {
                    let mut gk = vec![0.0; f * rows];
                    for s in 0..b {
                        let go = &g.data()[s * f * ncols..(s + 1) * f * ncols];
                        let col = &cols[s * rows * ncols..(s + 1) * rows * ncols];
                        kernels::gemm(f, ncols, rows, go, false, col, true, 1.0, &mut gk);
                    }
                    self.accumulate(grads, *kernel, Tensor::new(ks, gk).expect("kernel shape"));
                }
                if self.ng(*input) {
                    let img = geom.channels * geom.height * geom.width;
                    let mut gi = vec![0.0; b * img];
                    let mut dcol = vec![0.0; rows * ncols];
                    let k = self.value(*kernel).data();
                    for s in 0..b {
                        let go = &g.data()[s * f * ncols..(s + 1) * f * ncols];
                        kernels::gemm(rows, f, ncols, k, true, go, false, 0.0, &mut dcol);
                        kernels::col2im(&dcol, geom, &mut gi[s * img..(s + 1) * img]);
                    }
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(shape, gi).expect("input shape"));
                }
            }
            Op::Gap(a) => {
                let shape = self.value(*a).shape().to_vec();
                let spatial: usize = shape[2..].iter().product();
                let mut ga = Vec::with_capacity(spatial * g.len());
                for &v in g.data() {
                    let share = v / spatial as f64;
                    ga.extend(std::iter::repeat_n(share, spatial));
                }
                self.accumulate(grads, *a, Tensor::new(shape, ga).expect("gap shape"));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let rows = if sa.len() == 1 { 1 } else { sa[0] };
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga).expect("concat lhs"));
                self.accumulate(grads, *b, Tensor::new(sb, gb).expect("concat rhs"));
            }
            Op::ChannelScale { a, w, gate } => {
                let va = self.value(*a);
                let (b, c) = (va.shape()[0], va.shape()[1]);
                let spatial: usize = va.shape()[2..].iter().product();
                let shared = self.value(*w).rank() == 1;
                let factor = |s: usize, ch: usize| if shared { gate[ch] } else { gate[s * c + ch] };
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for s in 0..b {
                        for ch in 0..c {
                            let f = factor(s, ch);
                            let start = (s * c + ch) * spatial;
                            for x in &mut ga.data_mut()[start..start + spatial] {
                                *x *= f;
                            }
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*w) {
                    let faulty = self.fault == Some(GradFault::GateDerivative);
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    for s in 0..b {
                        for ch in 0..c {
                            let start = (s * c + ch) * spatial;
                            let dot: f64 = g.data()[start..start + spatial]
                                .iter()
                                .zip(&va.data()[start..start + spatial])
                                .map(|(x, y)| x * y)
                                .sum();
                            // d(2σ)/dw = 2σ(1−σ) = factor·(1 − factor/2)
                            let f = factor(s, ch);
                            let deriv = if faulty { f } else { f * (1.0 - 0.5 * f) };
                            let idx = if shared { ch } else { s * c + ch };
                            gw.data_mut()[idx] += dot * deriv;
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.value(*x).shape();
                let c = s[1];
                let spatial: usize = s[2..].iter().product();
                let n = (s[0] * spatial) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gc, xc)) in g.data().chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = i % c;
                    for (gv, xv) in gc.iter().zip(xc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.ng(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::vector(sum_gx.clone()));
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, Tensor::vector(sum_g.clone()));
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (i, ((gc, xc), out)) in g
                        .data()
                        .chunks(spatial)
                        .zip(xhat.chunks(spatial))
                        .zip(gx.chunks_mut(spatial))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch];
                        for ((gv, xv), o) in gc.iter().zip(xc).zip(out.iter_mut()) {
                            *o = if *batch_stats {
                                k * (gv - sum_g[ch] / n - xv * sum_gx[ch] / n)
                            } else {
                                k * gv
                            };
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(s.to_vec(), gx).expect("bn shape"));
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let b = labels.len() as f64;
                let scale = g.item() / b;
                let mut gl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gl[r * k + y] -= 1.0;
                }
                for v in &mut gl {
                    *v *= scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gl).expect("logit shape"));
            }
        }
    }
}
