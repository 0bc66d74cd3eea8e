//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Parameter
//! nodes borrow their values from a [`ParamStore`]; everything else is owned by
//! the tape. [`Graph::backward`] walks the tape once in reverse.
//!
//! Stop-gradient is [`Graph::detach`]: it copies a value into a fresh leaf that
//! never receives or forwards gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{col2im, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Normalize with batch statistics and queue a running-statistics update.
    Train { momentum: f64 },
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

enum Slot {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    GlobalAvgPool(Var),
    Reshape(Var),
    SumAll(Var),
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    StandardizeRows { x: Var, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    BarlowObjective { c: Var, lambda: f64 },
}

struct Node {
    slot: Slot,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations. Borrowing the parameter store keeps parameter values
/// out of the tape.
pub struct Graph<'s> {
    params: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A tape without parameters, for losses over plain tensors.
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_nodes: Vec::new(), buffer_updates: Vec::new() }
    }

    pub fn with_params(params: &'s ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_nodes: vec![None; params.len()], buffer_updates: Vec::new() }
    }

    pub fn params(&self) -> Option<&'s ParamStore> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.expect("param node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { slot: Slot::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked (for input-gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a stored parameter. Repeated requests return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let trainable = store.entry(id).kind.trainable();
        self.nodes.push(Node { slot: Slot::Param(id), op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// Running-statistics updates queued by training-mode normalization.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        core::mem::take(&mut self.buffer_updates)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let t = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.needs_grad(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// `x[n, d] + bias[d]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        if xs.ndim() != 2 || bs.len() != xs.shape()[1] {
            return Err(shape_err!("bias {:?} for input {:?}", bs.shape(), xs.shape()));
        }
        let d = bs.len();
        let mut t = xs.clone();
        for row in t.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(bs.data()) {
                *v += b;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng))
    }

    /// `op(a) · op(b)` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b), ta, tb)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {:?}", self.shape(a)));
        }
        let t = self.value(a).transpose2();
        let ng = self.needs_grad(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs_grad(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs_grad(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let ng = self.needs_grad(a);
        self.push(t, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// 2-D convolution without bias on NCHW input, kernel `[O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(shape_err!("conv2d input {:?} with kernel {:?}", xs, ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(shape_err!("kernel {:?} larger than padded input {:?}", ws, xs));
        }
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel_h: ws[2], kernel_w: ws[3], stride, pad };
        let (n, out_c) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let in_size = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; n * out_c * plane];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { geom.col_rows() * plane }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let kmat = MatRef::new(wv, out_c, geom.col_rows(), false);
            for i in 0..n {
                let img = &xv[i * in_size..(i + 1) * in_size];
                let patches = if geom.is_pointwise() {
                    img
                } else {
                    im2col(img, &geom, &mut cols);
                    &cols[..]
                };
                let pmat = MatRef::new(patches, geom.col_rows(), plane, false);
                let dst = &mut out[i * out_c * plane..(i + 1) * out_c * plane];
                gemm(out_c, geom.col_rows(), plane, 1.0, kmat, pmat, 0.0, dst, plane);
            }
        }
        let t = Tensor::from_vec(&[n, out_c, oh, ow], out)?;
        let ng = self.needs_grad(x) || self.needs_grad(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// Batch normalization over axis 1 of a `[N, C, ...]` tensor.
    pub fn batch_norm(&mut self, x: Var, p: &BatchNormParams, mode: NormMode) -> Result<Var> {
        let store = self.params.expect("batch_norm needs a parameter store");
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err!("batch_norm input {:?}", xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let m = n * spatial;
        if m == 0 {
            return Err(Error::Empty("batch_norm input"));
        }
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Train { .. } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        s += xv[off..off + spatial].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * spatial;
                        q += xv[off..off + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                (mean, var)
            }
            NormMode::Eval => (store.get(p.running_mean).data().to_vec(), store.get(p.running_var).data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + p.eps)).collect();
        let mut xhat = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                for k in off..off + spatial {
                    xhat[k] = (xv[k] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let mut y = xhat.clone();
        if p.gamma.is_some() || p.beta.is_some() {
            let g = p.gamma.map(|id| store.get(id).data());
            let b = p.beta.map(|id| store.get(id).data());
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * spatial;
                    let gc = g.map_or(1.0, |g| g[ch]);
                    let bc = b.map_or(0.0, |b| b[ch]);
                    for v in &mut y[off..off + spatial] {
                        *v = gc * *v + bc;
                    }
                }
            }
        }
        if let NormMode::Train { momentum } = mode {
            let rm = store.get(p.running_mean).data();
            let rv = store.get(p.running_var).data();
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let new_mean: Vec<f64> = rm.iter().zip(&mean).map(|(r, mu)| (1.0 - momentum) * r + momentum * mu).collect();
            let new_var: Vec<f64> = rv.iter().zip(&var).map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbias).collect();
            self.buffer_updates.push((p.running_mean, Tensor::from_vec(&[c], new_mean)?));
            self.buffer_updates.push((p.running_var, Tensor::from_vec(&[c], new_var)?));
        }
        let gamma = p.gamma.map(|id| self.param(id));
        let beta = p.beta.map(|id| self.param(id));
        let ng = self.needs_grad(x) || gamma.is_some_and(|g| self.needs_grad(g)) || beta.is_some_and(|b| self.needs_grad(b));
        let train = matches!(mode, NormMode::Train { .. });
        let xhat = Tensor::from_vec(&xs, xhat)?;
        Ok(self.push(Tensor::from_vec(&xs, y)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, ng))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("global_avg_pool input {:?}", xs));
        }
        let s = xs[2] * xs[3];
        let data: Vec<f64> = self.value(x).data().chunks(s).map(|c| c.iter().sum::<f64>() / s as f64).collect();
        let t = Tensor::from_vec(&[xs[0], xs[1]], data)?;
        let ng = self.needs_grad(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), ng))
    }

    /// Scales each row of a matrix to unit L2 norm, dividing by
    /// `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 2 {
            return Err(shape_err!("normalize_rows input {:?}", xs.shape()));
        }
        let d = xs.shape()[1];
        let mut norms = Vec::with_capacity(xs.shape()[0]);
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let nrm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            let denom = if nrm > eps { nrm } else { eps };
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(nrm);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms, eps }, ng))
    }

    /// Centers each row and divides by its (biased) standard deviation.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 2 || xs.shape()[1] == 0 {
            return Err(shape_err!("standardize_rows input {:?}", xs.shape()));
        }
        let d = xs.shape()[1];
        let mut out = xs.clone();
        let mut inv_std = Vec::with_capacity(xs.shape()[0]);
        for row in out.data_mut().chunks_mut(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::StandardizeRows { x, inv_std }, ng))
    }

    /// Mean softmax cross-entropy of `logits[n, k]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits);
        if ls.ndim() != 2 || ls.shape()[0] != labels.len() || labels.is_empty() {
            return Err(shape_err!("cross_entropy logits {:?} for {} labels", ls.shape(), labels.len()));
        }
        let k = ls.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange(alloc::format!("label {} for {} classes", bad, k)));
        }
        let probs = softmax_rows(ls);
        let loss = labels.iter().enumerate().map(|(i, &l)| -libm::log(probs.data()[i * k + l].max(f64::MIN_POSITIVE))).sum::<f64>()
            / labels.len() as f64;
        let ng = self.needs_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.value(x).ndim() != 2 {
            return Err(shape_err!("softmax_rows input {:?}", self.shape(x)));
        }
        let t = softmax_rows(self.value(x));
        let ng = self.needs_grad(x);
        Ok(self.push(t, Op::SoftmaxRows(x), ng))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 2 || start + width > xs.shape()[1] {
            return Err(shape_err!("slice {}..{} of {:?}", start, start + width, xs.shape()));
        }
        let (n, d) = (xs.shape()[0], xs.shape()[1]);
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(&xs.data()[i * d + start..i * d + start + width]);
        }
        let t = Tensor::from_vec(&[n, width], data)?;
        let ng = self.needs_grad(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    /// Rows `rows` (repeats allowed) of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        if xs.ndim() != 2 || rows.iter().any(|&r| r >= xs.shape()[0]) {
            return Err(shape_err!("gather rows {:?} of {:?}", rows, xs.shape()));
        }
        let t = xs.gather(rows);
        let ng = self.needs_grad(x);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// `Σᵢ (1 − Cᵢᵢ)² + λ Σᵢ Σ_{j≠i} Cᵢⱼ²` for a square matrix `C`.
    pub fn barlow_objective(&mut self, c: Var, lambda: f64) -> Result<Var> {
        let cs = self.value(c);
        if cs.ndim() != 2 || cs.shape()[0] != cs.shape()[1] {
            return Err(shape_err!("cross-correlation must be square, got {:?}", cs.shape()));
        }
        let t = Tensor::scalar(barlow_value(cs, lambda));
        let ng = self.needs_grad(c);
        Ok(self.push(t, Op::BarlowObjective { c, lambda }, ng))
    }

    /// Gradients of a scalar node with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        let param_grads = self.param_nodes.iter().map(|v| v.and_then(|v| grads[v.0].clone())).collect();
        Ok(Gradients { nodes: grads, params: param_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = match &self.nodes[i].slot {
            Slot::Owned(t) => t,
            Slot::Param(_) => unreachable!("parameter nodes are leaves"),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.zip_with(self.value(*b), |x, y| x * y)?);
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.zip_with(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs_grad(*bias) {
                    let d = self.value(*bias).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[d], gb)?);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let ga = if *ta { bv.matmul(g, *tb, true)? } else { g.matmul(bv, false, !*tb)? };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad(*b) {
                    let gb = if *tb { g.matmul(av, true, *ta)? } else { av.matmul(g, !*ta, false)? };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose2()),
            Op::Relu(a) => {
                let gx = g.zip_with(out, |gv, y| if y > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, gx);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Conv2d { x, w, geom } => self.conv_backward(*x, *w, geom, g, grads)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = xhat.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = (n * spatial) as f64;
                let gamma_v = gamma.map(|v| self.value(v).data().to_vec());
                let (gd, xh) = (g.data(), xhat.data());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        for k in off..off + spatial {
                            dgamma[ch] += gd[k] * xh[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let gc = gamma_v.as_ref().map_or(1.0, |gv| gv[ch]);
                        if *train {
                            // dxhat = g·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                            let s1 = gc * dbeta[ch];
                            let s2 = gc * dgamma[ch];
                            let scale = inv_std[ch] / m;
                            for i in 0..n {
                                let off = (i * c + ch) * spatial;
                                for k in off..off + spatial {
                                    dx[k] = scale * (m * gc * gd[k] - s1 - xh[k] * s2);
                                }
                            }
                        } else {
                            for i in 0..n {
                                let off = (i * c + ch) * spatial;
                                for k in off..off + spatial {
                                    dx[k] = gd[k] * gc * inv_std[ch];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(shape, dx)?);
                }
                if let Some(gv) = gamma {
                    self.accumulate(grads, *gv, Tensor::from_vec(&[c], dgamma)?);
                }
                if let Some(bv) = beta {
                    self.accumulate(grads, *bv, Tensor::from_vec(&[c], dbeta)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let s = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(s * g.len());
                for &v in g.data() {
                    dx.extend(core::iter::repeat_n(v / s as f64, s));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx)?);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = out.shape()[1];
                let mut dx = g.clone();
                for (r, (grow, yrow)) in dx.data_mut().chunks_mut(d.max(1)).zip(out.data().chunks(d.max(1))).enumerate() {
                    let nrm = norms[r];
                    if nrm > *eps {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = (*gv - yv * dot) / nrm;
                        }
                    } else {
                        for gv in grow.iter_mut() {
                            *gv /= eps;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StandardizeRows { x, inv_std } => {
                let d = out.shape()[1];
                let m = d as f64;
                let mut dx = g.clone();
                for (r, (grow, yrow)) in dx.data_mut().chunks_mut(d).zip(out.data().chunks(d)).enumerate() {
                    let s1: f64 = grow.iter().sum();
                    let s2: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    let scale = inv_std[r] / m;
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = scale * (m * *gv - s1 - yv * s2);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let n = labels.len() as f64;
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx.data_mut()[i * k + l] -= 1.0;
                }
                let s = g.item() / n;
                for v in dx.data_mut() {
                    *v *= s;
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::SoftmaxRows(x) => {
                let k = out.shape()[1];
                let mut dx = g.clone();
                for (grow, yrow) in dx.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let (n, d) = (shape[0], shape[1]);
                let w = out.shape()[1];
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx)?);
            }
            Op::GatherRows { x, rows } => {
                let shape = self.value(*x).shape().to_vec();
                let d = shape[1];
                let mut dx = vec![0.0; shape[0] * d];
                for (k, &r) in rows.iter().enumerate() {
                    for (a, b) in dx[r * d..(r + 1) * d].iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx)?);
            }
            Op::BarlowObjective { c, lambda } => {
                let cv = self.value(*c);
                let d = cv.shape()[0];
                let s = g.item();
                let mut dc = cv.clone();
                for i in 0..d {
                    for j in 0..d {
                        let v = &mut dc.data_mut()[i * d + j];
                        *v = if i == j { -2.0 * (1.0 - *v) * s } else { 2.0 * lambda * *v * s };
                    }
                }
                self.accumulate(grads, *c, dc);
            }
        }
        Ok(())
    }

    fn conv_backward(&self, x: Var, w: Var, geom: &ConvGeom, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.shape()[0];
        let out_c = wv.shape()[0];
        let plane = geom.out_h() * geom.out_w();
        let rows = geom.col_rows();
        let in_size = geom.channels * geom.height * geom.width;
        let want_x = self.needs_grad(x);
        let want_w = self.needs_grad(w);
        let mut dw = vec![0.0; if want_w { out_c * rows } else { 0 }];
        let mut dx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut cols = vec![0.0; rows * plane];
        let mut dcols = vec![0.0; if want_x { rows * plane } else { 0 }];
        for i in 0..n {
            let gout = MatRef::new(&g.data()[i * out_c * plane..(i + 1) * out_c * plane], out_c, plane, false);
            let img = &xv.data()[i * in_size..(i + 1) * in_size];
            if want_w {
                let patches: &[f64] = if geom.is_pointwise() {
                    img
                } else {
                    im2col(img, geom, &mut cols);
                    &cols
                };
                let pt = MatRef::new(patches, rows, plane, true);
                gemm(out_c, plane, rows, 1.0, gout, pt, 1.0, &mut dw, rows);
            }
            if want_x {
                let kt = MatRef::new(wv.data(), out_c, rows, true);
                let dst = &mut dx[i * in_size..(i + 1) * in_size];
                if geom.is_pointwise() {
                    gemm(rows, out_c, plane, 1.0, kt, gout, 0.0, dst, plane);
                } else {
                    gemm(rows, out_c, plane, 1.0, kt, gout, 0.0, &mut dcols, plane);
                    col2im(&dcols, geom, dst);
                }
            }
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx)?);
        }
        Ok(())
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient reaching a leaf (or the loss node itself).
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed by [`ParamId`]; `None` where the
    /// parameter took no part in the loss.
    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.shape()[1].max(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn barlow_value(c: &Tensor, lambda: f64) -> f64 {
    let d = c.shape()[0];
    let mut on = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = c.data()[i * d + j];
            if i == j {
                on += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    on + lambda * off
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::testing::{central_difference, rel_error, seeded_tensor};

    /// Checks `d(sum(f(x) ⊙ probe))/dx` against finite differences.
    fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Var) {
        let x0 = seeded_tensor(shape, seed);
        let probe = seeded_tensor(&f_shape(shape, &f), seed + 99);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = f(&mut g, xv);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let xv = g.input_with_grad(x0.clone());
        let y = f(&mut g, xv);
        let p = g.input(probe.clone());
        let prod = g.mul(y, p).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.of(xv).unwrap().data().to_vec();
        let numeric = central_difference(&x0, 1e-5, eval);
        assert!(rel_error(&analytic, &numeric) < 1e-6, "analytic {:?} numeric {:?}", analytic, numeric);
    }

    fn f_shape(shape: &[usize], f: &impl Fn(&mut Graph, Var) -> Var) -> Vec<usize> {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(shape));
        let y = f(&mut g, x);
        g.shape(y).to_vec()
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        check_unary(&[3, 4], 1, |g, x| g.relu(x));
        check_unary(&[3, 4], 2, |g, x| g.transpose(x).unwrap());
        check_unary(&[3, 4], 3, |g, x| g.normalize_rows(x, 1e-12).unwrap());
        check_unary(&[3, 5], 4, |g, x| g.standardize_rows(x, 1e-12).unwrap());
        check_unary(&[3, 4], 5, |g, x| g.softmax_rows(x).unwrap());
        check_unary(&[3, 6], 6, |g, x| g.slice_cols(x, 2, 3).unwrap());
        check_unary(&[4, 3], 7, |g, x| g.gather_rows(x, &[2, 0, 2]).unwrap());
        check_unary(&[3, 4], 7, |g, x| g.matmul(x, x, false, true).unwrap());
        check_unary(&[3, 4], 8, |g, x| g.matmul(x, x, true, false).unwrap());
        check_unary(&[4, 4], 9, |g, x| g.barlow_objective(x, 0.3).unwrap());
        check_unary(&[2, 3, 4, 4], 10, |g, x| g.global_avg_pool(x).unwrap());
        check_unary(&[4, 3], 11, |g, x| g.cross_entropy(x, &[0, 2, 1, 1]).unwrap());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let w = seeded_tensor(&[4, 3, k, k], 20 + stride as u64);
            let wc = w.clone();
            check_unary(&[2, 3, 5, 5], 30, move |g, x| {
                let wv = g.input(wc.clone());
                g.conv2d(x, wv, stride, pad).unwrap()
            });
            let x = seeded_tensor(&[2, 3, 5, 5], 31);
            check_unary(&[4, 3, k, k], 32, move |g, wv| {
                let xv = g.input(x.clone());
                g.conv2d(xv, wv, stride, pad).unwrap()
            });
        }
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", ParamKind::NormScale, seeded_tensor(&[3], 40));
        let beta = store.add("b", ParamKind::NormShift, seeded_tensor(&[3], 41));
        let rm = store.add("rm", ParamKind::RunningMean, seeded_tensor(&[3], 42));
        let rv = store.add("rv", ParamKind::RunningVar, Tensor::full(&[3], 0.7));
        let p = BatchNormParams { gamma: Some(gamma), beta: Some(beta), running_mean: rm, running_var: rv, eps: 1e-5 };
        for mode in [NormMode::Train { momentum: 0.1 }, NormMode::Eval] {
            for shape in [[4usize, 3, 2, 2].as_slice(), [5, 3].as_slice()] {
                let store = &store;
                let f = move |g: &mut Graph, x: Var| g.batch_norm(x, &p, mode).unwrap();
                let x0 = seeded_tensor(shape, 50);
                let probe = {
                    let mut g = Graph::with_params(store);
                    let x = g.input(x0.clone());
                    let y = f(&mut g, x);
                    seeded_tensor(g.shape(y), 51)
                };
                let eval = |x: &Tensor| {
                    let mut g = Graph::with_params(store);
                    let xv = g.input(x.clone());
                    let y = f(&mut g, xv);
                    g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let mut g = Graph::with_params(store);
                let xv = g.input_with_grad(x0.clone());
                let y = f(&mut g, xv);
                let pv = g.input(probe.clone());
                let prod = g.mul(y, pv).unwrap();
                let loss = g.sum(prod);
                let grads = g.backward(loss).unwrap();
                let numeric = central_difference(&x0, 1e-5, eval);
                assert!(rel_error(grads.of(xv).unwrap().data(), &numeric) < 1e-6);
                assert!(grads.param(gamma).is_some() && grads.param(beta).is_some());
                assert!(grads.param(rm).is_none());
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // only the non-detached factor contributes: d/dx (x · const) = const
        assert_eq!(grads.of(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let mut g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn training_norm_queues_running_update() {
        let mut store = ParamStore::new();
        let rm = store.add("rm", ParamKind::RunningMean, Tensor::zeros(&[1]));
        let rv = store.add("rv", ParamKind::RunningVar, Tensor::full(&[1], 1.0));
        let p = BatchNormParams { gamma: None, beta: None, running_mean: rm, running_var: rv, eps: 1e-5 };
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap());
        g.batch_norm(x, &p, NormMode::Train { momentum: 0.1 }).unwrap();
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1.item() - 0.2).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((updates[1].1.item() - 1.1).abs() < 1e-15);
    }
}
