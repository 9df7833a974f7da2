//! Tape-based reverse-mode differentiation over the fixed set of layer
//! operations the classifiers, generator, losses and attacks need.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, ConvGrads};
use crate::tensor::{matmul, MatLayout, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a batch-norm node normalises its input.
#[derive(Debug, Clone)]
pub enum NormStats<F> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with fixed (running) mean and variance.
    Fixed { mean: Vec<F>, var: Vec<F> },
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
        mean: Vec<F>,
        var: Vec<F>,
    },
    Relu(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Upsample2(Var),
    Add(Var, Var),
    Reshape(Var),
    WeightedSum(Vec<(Var, F)>),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
        scale: F,
    },
    Kl {
        reference: Var,
        target: Var,
        tau: F,
        p_ref: Vec<F>,
        log_ratio: Vec<F>,
        p_target: Vec<F>,
        row_kl: Vec<F>,
        scale: F,
    },
    CwMargin {
        logits: Var,
        labels: Vec<usize>,
        runner_up: Vec<usize>,
        scale: F,
    },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2 { .. } => "max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample2(_) => "upsample",
            Op::Add(..) => "add",
            Op::Reshape(_) => "reshape",
            Op::WeightedSum(_) => "weighted_sum",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Kl { .. } => "kl_divergence",
            Op::CwMargin { .. } => "cw_margin",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    label: Option<String>,
}

/// Loss reduction over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn scale<F: Scalar>(self, batch: usize) -> F {
        match self {
            Reduction::Mean => F::one() / F::from_usize(batch.max(1)).unwrap(),
            Reduction::Sum => F::one(),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// A recording of one forward computation.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Attaches a human-readable name used in numerical diagnostics.
    pub fn set_label(&mut self, var: Var, label: impl Into<String>) {
        self.nodes[var.0].label = Some(label.into());
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Batch mean and biased variance recorded by a batch-statistics norm node.
    pub fn batch_norm_stats(&self, var: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[var.0].op {
            Op::BatchNorm {
                batch_stats: true,
                mean,
                var,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::shape(&ws, &xs, "conv2d input/weight"));
        }
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::shape(&ws, &xs, "conv2d kernel larger than input"));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        if let Some(b) = b {
            self.value(b).expect_shape(&[ws[0]], "conv2d bias")?;
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// `y = x @ w^T + b` with `x: (B, in)`, `w: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(&ws, &xs, "linear input/weight"));
        }
        let (batch, out_dim) = (xs[0], ws[0]);
        let mut out = vec![F::zero(); batch * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape(&[out_dim], "linear bias")?;
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul(
            F::one(),
            self.value(x).data(),
            MatLayout::row_major(batch, xs[1]),
            self.value(w).data(),
            MatLayout::transposed(out_dim, xs[1]),
            F::one(),
            &mut out,
            MatLayout::row_major(batch, out_dim),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(vec![batch, out_dim], out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Per-channel normalisation of `(B, C, H, W)` (or `(B, C)`) input.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<F>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(&[0, 0], &shape, "batch_norm input"));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        self.value(gamma).expect_shape(&[channels], "batch_norm gamma")?;
        self.value(beta).expect_shape(&[channels], "batch_norm beta")?;
        let eps = F::from_f64_lossy(BN_EPS);
        let xd = self.value(x).data();
        let count = F::from_usize(batch * plane).unwrap();
        let batch_stats = matches!(stats, NormStats::Batch);
        let (mean, var) = match stats {
            NormStats::Batch => {
                if batch * plane < 2 {
                    return Err(Error::input("batch statistics need at least two values per channel"));
                }
                let mut mean = vec![F::zero(); channels];
                let mut var = vec![F::zero(); channels];
                for c in 0..channels {
                    let mut s = F::zero();
                    for b in 0..batch {
                        s += xd[(b * channels + c) * plane..][..plane]
                            .iter()
                            .fold(F::zero(), |a, &v| a + v);
                    }
                    let m = s / count;
                    let mut sq = F::zero();
                    for b in 0..batch {
                        sq += xd[(b * channels + c) * plane..][..plane]
                            .iter()
                            .fold(F::zero(), |a, &v| a + (v - m) * (v - m));
                    }
                    mean[c] = m;
                    var[c] = sq / count;
                }
                (mean, var)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape(&[channels], &[mean.len()], "batch_norm running stats"));
                }
                (mean, var)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + be[c];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
            mean,
            var,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(F::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::from_f64_lossy(slope);
        let v = self.value(x).map(|a| if a > F::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| F::one() / (F::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(&[0, 0, 2, 2], &s, "max_pool2 input"));
        }
        let (ho, wo) = (s[2] / 2, s[3] / 2);
        let xd = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![F::zero(); planes * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            let base = p * s[2] * s[3];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * s[3] + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s[3] + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Mean over spatial positions: `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(&[0, 0, 0, 0], &s, "global_avg_pool input"));
        }
        let plane = s[2] * s[3];
        let n = F::from_usize(plane).unwrap();
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().fold(F::zero(), |a, &v| a + v) / n)
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(&[0, 0, 0, 0], &s, "upsample2 input"));
        }
        let (h, w) = (s[2], s[3]);
        let xd = self.value(x).data();
        let mut out = vec![F::zero(); xd.len() * 4];
        for (p, src) in xd.chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(va.shape(), vb.shape(), "add"));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `Σ w_i · x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| Error::input("weighted sum of no terms"))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut out = vec![F::zero(); self.value(first.0).numel()];
        let mut typed = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(&shape, t.shape(), "weighted_sum"));
            }
            let w = F::from_f64_lossy(w);
            for (o, &x) in out.iter_mut().zip(t.data()) {
                *o += w * x;
            }
            typed.push((v, w));
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::WeightedSum(typed), &inputs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    fn check_labels(&self, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(&[labels.len(), 0], s, "logits vs labels"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::input(format!("label {bad} out of range for {} classes", s[1])));
        }
        Ok((s[0], s[1]))
    }

    /// Cross-entropy of `logits` against integer `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (batch, classes) = self.check_labels(logits, labels)?;
        let scale: F = reduction.scale(batch);
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); batch * classes];
        let mut logp = vec![F::zero(); classes];
        let mut total = F::zero();
        for b in 0..batch {
            let row = &lv[b * classes..][..classes];
            kernels::log_softmax_row(row, F::one(), &mut logp);
            total -= logp[labels[b]];
            for (p, &l) in probs[b * classes..][..classes].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            scale,
        };
        Ok(self.push(Tensor::scalar(total * scale), op, &[logits]))
    }

    /// `τ² · Σ_b KL(softmax(ref_b/τ) ‖ softmax(target_b/τ))`, reduced over the batch.
    ///
    /// Gradients flow into both arguments.
    pub fn kl_div(&mut self, reference: Var, target: Var, tau: f64, reduction: Reduction) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::input(format!("temperature must be positive, got {tau}")));
        }
        let (rs, ts) = (self.value(reference).shape(), self.value(target).shape());
        if rs != ts || rs.len() != 2 {
            return Err(Error::shape(rs, ts, "kl_div reference vs target"));
        }
        let (batch, classes) = (rs[0], rs[1]);
        let t = F::from_f64_lossy(tau);
        let scale: F = reduction.scale(batch);
        let (rv, tv) = (self.value(reference).data(), self.value(target).data());
        let n = batch * classes;
        let mut p_ref = vec![F::zero(); n];
        let mut p_target = vec![F::zero(); n];
        let mut log_ratio = vec![F::zero(); n];
        let mut row_kl = vec![F::zero(); batch];
        let mut lr = vec![F::zero(); classes];
        let mut lt = vec![F::zero(); classes];
        let mut total = F::zero();
        for b in 0..batch {
            let r = b * classes..(b + 1) * classes;
            kernels::log_softmax_row(&rv[r.clone()], t, &mut lr);
            kernels::log_softmax_row(&tv[r.clone()], t, &mut lt);
            let mut kl = F::zero();
            for j in 0..classes {
                let i = b * classes + j;
                p_ref[i] = lr[j].exp();
                p_target[i] = lt[j].exp();
                log_ratio[i] = lr[j] - lt[j];
                kl += p_ref[i] * log_ratio[i];
            }
            row_kl[b] = kl;
            total += kl;
        }
        let value = total * t * t * scale;
        let op = Op::Kl {
            reference,
            target,
            tau: t,
            p_ref,
            log_ratio,
            p_target,
            row_kl,
            scale,
        };
        Ok(self.push(Tensor::scalar(value), op, &[reference, target]))
    }

    /// Carlini-Wagner margin `max_{j≠y} z_j − z_y`, reduced over the batch.
    pub fn cw_margin(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (batch, classes) = self.check_labels(logits, labels)?;
        if classes < 2 {
            return Err(Error::input("margin loss needs at least two classes"));
        }
        let scale: F = reduction.scale(batch);
        let lv = self.value(logits).data();
        let mut runner_up = Vec::with_capacity(batch);
        let mut total = F::zero();
        for (b, &y) in labels.iter().enumerate() {
            let row = &lv[b * classes..][..classes];
            let mut best = if y == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > row[best] {
                    best = j;
                }
            }
            runner_up.push(best);
            total += row[best] - row[y];
        }
        let op = Op::CwMargin {
            logits,
            labels: labels.to_vec(),
            runner_up,
            scale,
        };
        Ok(self.push(Tensor::scalar(total * scale), op, &[logits]))
    }

    /// Hash of every piecewise-linear branch taken during the forward pass
    /// (activation signs, pooling winners). Finite differences are only valid
    /// while this signature is unchanged.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > F::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::CwMargin { runner_up, .. } => runner_up.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn non_finite_diagnostic(&self) -> Error {
        for node in &self.nodes {
            if let Some(&bad) = node.value.data().iter().find(|v| !v.is_finite()) {
                let location = match &node.label {
                    Some(l) => format!("{} ({})", l, node.op.name()),
                    None => node.op.name().to_string(),
                };
                return Error::Numerical {
                    location,
                    value: bad.to_f64_lossy(),
                };
            }
        }
        Error::Numerical {
            location: "unknown".into(),
            value: f64::NAN,
        }
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(&[], lv.shape(), "backward requires a scalar loss"));
        }
        if !lv.is_finite() {
            return Err(self.non_finite_diagnostic());
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, i: usize, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.wants(*x).then(|| vec![F::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![F::zero(); wv.len()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![F::zero(); geom.out_channels]);
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    g,
                    ConvGrads {
                        input: dx.as_deref_mut(),
                        weight: dw.as_deref_mut(),
                        bias: db.as_deref_mut(),
                    },
                );
                for (var, d) in [(Some(*x), dx), (Some(*w), dw), (*b, db)] {
                    if let (Some(var), Some(d)) = (var, d) {
                        self.accumulate(grads, var, |acc| add_into(acc, &d));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, in_dim) = (xs[0], xs[1]);
                let out_dim = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    self.accumulate(grads, *x, |acc| {
                        matmul(
                            F::one(),
                            g,
                            MatLayout::row_major(batch, out_dim),
                            wv,
                            MatLayout::row_major(out_dim, in_dim),
                            F::one(),
                            acc,
                            MatLayout::row_major(batch, in_dim),
                        )
                    });
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    self.accumulate(grads, *w, |acc| {
                        matmul(
                            F::one(),
                            g,
                            MatLayout::transposed(batch, out_dim),
                            xv,
                            MatLayout::row_major(batch, in_dim),
                            F::one(),
                            acc,
                            MatLayout::row_major(out_dim, in_dim),
                        )
                    });
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.accumulate(grads, b, |acc| {
                        for row in g.chunks(out_dim) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                ..
            } => {
                let s = self.value(*x).shape();
                let (batch, channels) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![F::zero(); channels];
                let mut sum_gx = vec![F::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for j in off..off + plane {
                            sum_g[c] += g[j];
                            sum_gx[c] += g[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, |acc| add_into(acc, &sum_gx));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, |acc| add_into(acc, &sum_g));
                }
                if self.wants(*x) {
                    let m = F::from_usize(batch * plane).unwrap();
                    self.accumulate(grads, *x, |acc| {
                        for b in 0..batch {
                            for c in 0..channels {
                                let off = (b * channels + c) * plane;
                                let k = gv[c] * inv_std[c];
                                for j in off..off + plane {
                                    acc[j] += if *batch_stats {
                                        k * (g[j] - sum_g[c] / m - xhat[j] * sum_gx[c] / m)
                                    } else {
                                        k * g[j]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        if xi > F::zero() {
                            *a += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a += if xi > F::zero() { gi } else { gi * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &gi), &y) in acc.iter_mut().zip(g).zip(yv) {
                        *a += gi * y * (F::one() - y);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        acc[src] += gi;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let n = F::from_usize(plane).unwrap();
                self.accumulate(grads, *x, |acc| {
                    for (chunk, &gi) in acc.chunks_mut(plane).zip(g) {
                        for a in chunk {
                            *a += gi / n;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *x, |acc| {
                    for (p, dst) in acc.chunks_mut(h * w).enumerate() {
                        let src = &g[p * 4 * h * w..][..4 * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, |acc| add_into(acc, g));
                    }
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |acc| add_into(acc, g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        self.accumulate(grads, v, |acc| {
                            for (a, &gi) in acc.iter_mut().zip(g) {
                                *a += w * gi;
                            }
                        });
                    }
                }
            }
            Op::SumAll(x) => {
                let gi = g[0];
                self.accumulate(grads, *x, |acc| {
                    for a in acc.iter_mut() {
                        *a += gi;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                scale,
            } => {
                let classes = probs.len() / labels.len().max(1);
                let k = g[0] * *scale;
                self.accumulate(grads, *logits, |acc| {
                    for (b, &y) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let i = b * classes + j;
                            let onehot = if j == y { F::one() } else { F::zero() };
                            acc[i] += k * (probs[i] - onehot);
                        }
                    }
                });
            }
            Op::Kl {
                reference,
                target,
                tau,
                p_ref,
                log_ratio,
                p_target,
                row_kl,
                scale,
            } => {
                let classes = p_ref.len() / row_kl.len().max(1);
                // d/dz of τ²·KL through the 1/τ softening leaves a factor τ.
                let k = g[0] * *scale * *tau;
                if self.wants(*target) {
                    self.accumulate(grads, *target, |acc| {
                        for i in 0..acc.len() {
                            acc[i] += k * (p_target[i] - p_ref[i]);
                        }
                    });
                }
                if self.wants(*reference) {
                    self.accumulate(grads, *reference, |acc| {
                        for i in 0..acc.len() {
                            let kl = row_kl[i / classes];
                            acc[i] += k * p_ref[i] * (log_ratio[i] - kl);
                        }
                    });
                }
            }
            Op::CwMargin {
                logits,
                labels,
                runner_up,
                scale,
            } => {
                let classes = self.value(*logits).shape()[1];
                let k = g[0] * *scale;
                self.accumulate(grads, *logits, |acc| {
                    for (b, (&y, &j)) in labels.iter().zip(runner_up).enumerate() {
                        acc[b * classes + j] += k;
                        acc[b * classes + y] -= k;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<F: Scalar>(acc: &mut [F], src: &[F]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}
