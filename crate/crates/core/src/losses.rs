//! Training objectives: the generator's class-fit and adversarial terms,
//! their weighted combination, the temperature-scaled distillation loss,
//! and Shannon entropy of soft labels.
//!
//! Every temperature-scaled KL uses the teacher as the reference
//! distribution, softens both sides by `tau`, and multiplies by `tau²`.

use crate::autograd::{Graph, Reduction, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossComponent {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

/// Scalar loss value with the weighted parts it was assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub components: Vec<LossComponent>,
}

impl LossValue {
    fn single(name: &'static str, value: f64) -> Self {
        Self {
            value,
            components: vec![LossComponent {
                name,
                value,
                weight: 1.0,
            }],
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// A loss recorded on a graph together with its value.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub var: Var,
    pub value: LossValue,
}

fn checked<F: Scalar>(g: &Graph<F>, var: Var, name: &'static str) -> Result<LossTerm> {
    let v = g.value(var).item().to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::Numerical {
            location: format!("{name} loss"),
            value: v,
        });
    }
    Ok(LossTerm {
        var,
        value: LossValue::single(name, v),
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 1.0 && tau.is_finite()) {
        return Err(Error::input(format!("distillation temperature must be >= 1, got {tau}")));
    }
    Ok(())
}

/// Mean cross-entropy of the teacher's prediction on generated images
/// against the labels they were conditioned on.
pub fn cls_loss<F: Scalar>(g: &mut Graph<F>, teacher_logits: Var, labels: &[usize]) -> Result<LossTerm> {
    let v = g.cross_entropy(teacher_logits, labels, Reduction::Mean)?;
    checked(g, v, "cls")
}

/// Negated temperature-scaled KL between teacher and student; the generator
/// minimises this to find images the two disagree on.
pub fn adv_gen_loss<F: Scalar>(g: &mut Graph<F>, teacher_logits: Var, student_logits: Var, tau: f64) -> Result<LossTerm> {
    check_tau(tau)?;
    let kl = g.kl_div(teacher_logits, student_logits, tau, Reduction::Mean)?;
    let neg = g.weighted_sum(&[(kl, -1.0)])?;
    checked(g, neg, "adv")
}

/// Temperature-scaled KL of the student against the teacher on adversarial
/// examples, averaged over the batch.
pub fn kd_loss<F: Scalar>(g: &mut Graph<F>, teacher_logits: Var, student_logits: Var, tau: f64) -> Result<LossTerm> {
    check_tau(tau)?;
    let kl = g.kl_div(teacher_logits, student_logits, tau, Reduction::Mean)?;
    checked(g, kl, "kd")
}

/// `lambda · cls + (1 − lambda) · adv`.
pub fn gen_loss<F: Scalar>(g: &mut Graph<F>, cls: &LossTerm, adv: &LossTerm, lambda: f64) -> Result<LossTerm> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::input(format!("generator balance must lie in (0, 1], got {lambda}")));
    }
    let v = g.weighted_sum(&[(cls.var, lambda), (adv.var, 1.0 - lambda)])?;
    let mut term = checked(g, v, "gen")?;
    term.value.components = vec![
        LossComponent {
            name: "cls",
            value: cls.value.value,
            weight: lambda,
        },
        LossComponent {
            name: "adv",
            value: adv.value.value,
            weight: 1.0 - lambda,
        },
    ];
    Ok(term)
}

/// Natural-log entropy of each probability row and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

pub fn info_entropy<F: Scalar>(probs: &Tensor<F>) -> Result<EntropyReport> {
    if probs.ndim() != 2 || probs.batch() == 0 {
        return Err(Error::shape(&[1, 0], probs.shape(), "entropy expects a non-empty (batch, classes) tensor"));
    }
    let mut per_row = Vec::with_capacity(probs.batch());
    for i in 0..probs.batch() {
        let row = probs.row(i);
        let mut h = 0.0;
        let mut total = 0.0;
        for &p in row {
            let p = p.to_f64_lossy();
            if p < 0.0 || p.is_nan() {
                return Err(Error::input(format!("row {i} holds a negative probability {p}")));
            }
            total += p;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::input(format!("row {i} sums to {total}, not 1")));
        }
        per_row.push(h);
    }
    let mean = per_row.iter().sum::<f64>() / per_row.len() as f64;
    Ok(EntropyReport { per_row, mean })
}
