//! SGD with momentum and weight decay, Adam, and cosine annealing.

use crate::error::{Error, Result};
use crate::models::NamedTensor;
use crate::tensor::{Scalar, Tensor};

fn check_grads<F: Scalar>(params: &[NamedTensor<F>], grads: &[Tensor<F>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::input(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(p.value.shape(), g.shape(), format!("gradient of {}", p.name)));
        }
        if !g.is_finite() {
            return Err(Error::Numerical {
                location: format!("gradient of {}", p.name),
                value: g.data().iter().find(|v| !v.is_finite()).unwrap().to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate for `epoch` of a `total`-epoch run.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = epoch.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Optimiser state in serialisable form.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub steps: u64,
    pub tensors: Vec<(String, Tensor<F>)>,
}

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    steps: u64,
    buffers: Vec<Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(params: &[NamedTensor<F>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            steps: 0,
            buffers: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [NamedTensor<F>], grads: &[Tensor<F>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        let (lr, mu, wd) = (
            F::from_f64_lossy(lr),
            F::from_f64_lossy(self.momentum),
            F::from_f64_lossy(self.weight_decay),
        );
        let first = self.steps == 0;
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((w, &gi), b) in p.value.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gi + wd * *w;
                *b = if first { d } else { mu * *b + d };
                *w -= lr * *b;
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn state(&self) -> OptimizerState<F> {
        OptimizerState {
            steps: self.steps,
            tensors: self
                .buffers
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("momentum.{i}"), b.clone()))
                .collect(),
        }
    }

    pub fn load_state(&mut self, state: OptimizerState<F>) -> Result<()> {
        load_into(&mut self.buffers, state.tensors, "sgd")?;
        self.steps = state.steps;
        Ok(())
    }
}

fn load_into<F: Scalar>(dst: &mut [Tensor<F>], src: Vec<(String, Tensor<F>)>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "{what} state has {} tensors, expected {}",
            src.len(),
            dst.len()
        )));
    }
    for (d, (name, s)) in dst.iter_mut().zip(src) {
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!("{what} state tensor '{name}' has shape {:?}", s.shape())));
        }
        *d = s;
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &[NamedTensor<F>], lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [NamedTensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        check_grads(params, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let step = F::from_f64_lossy(self.lr / c1);
        let c2_sqrt = F::from_f64_lossy(c2.sqrt());
        let eps = F::from_f64_lossy(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn state(&self) -> OptimizerState<F> {
        let mut tensors: Vec<(String, Tensor<F>)> =
            self.m.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t.clone())).collect();
        tensors.extend(self.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t.clone())));
        OptimizerState {
            steps: self.steps,
            tensors,
        }
    }

    pub fn load_state(&mut self, state: OptimizerState<F>) -> Result<()> {
        let n = self.m.len();
        if state.tensors.len() != 2 * n {
            return Err(Error::Checkpoint(format!(
                "adam state has {} tensors, expected {}",
                state.tensors.len(),
                2 * n
            )));
        }
        let mut tensors = state.tensors;
        let v = tensors.split_off(n);
        load_into(&mut self.m, tensors, "adam first moment")?;
        load_into(&mut self.v, v, "adam second moment")?;
        self.steps = state.steps;
        Ok(())
    }
}
