//! Per-batch adaptive hyperparameters.
//!
//! The distillation temperature follows the mean teacher/student confidence
//! gap on the teacher's predicted class, scaled by the class count and
//! floored at 1. The generator balance is the inverse of `C` times the mean
//! teacher confidence, which lies in `(0, 1]` because the mean max-probability
//! is never below `1 / C`.

use crate::error::{Error, Result};
use crate::models::softmax_with_temperature;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceStats {
    /// Teacher max-probability per sample.
    pub con_t: Vec<f64>,
    /// Student probability at the teacher's argmax class.
    pub con_s: Vec<f64>,
    /// Teacher argmax class (lowest index on ties).
    pub class: Vec<usize>,
}

impl ConfidenceStats {
    pub fn len(&self) -> usize {
        self.con_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.con_t.is_empty()
    }

    pub fn mean_gap(&self) -> f64 {
        self.con_t
            .iter()
            .zip(&self.con_s)
            .map(|(t, s)| (t - s).abs())
            .sum::<f64>()
            / self.len() as f64
    }

    pub fn mean_teacher_confidence(&self) -> f64 {
        self.con_t.iter().sum::<f64>() / self.len() as f64
    }
}

/// Hyperparameters in force for one batch, with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub tau: f64,
    pub lambda: f64,
    pub stats: ConfidenceStats,
    pub epoch: usize,
    pub batch: usize,
}

/// Temperature-1 confidences of teacher and student on the same inputs.
pub fn confidence_stats<F: Scalar>(teacher_logits: &Tensor<F>, student_logits: &Tensor<F>) -> Result<ConfidenceStats> {
    if teacher_logits.shape() != student_logits.shape() || teacher_logits.ndim() != 2 {
        return Err(Error::shape(
            teacher_logits.shape(),
            student_logits.shape(),
            "teacher vs student logits",
        ));
    }
    let pt = softmax_with_temperature(teacher_logits, 1.0)?;
    let ps = softmax_with_temperature(student_logits, 1.0)?;
    let class = pt.argmax_rows();
    let con_t = class
        .iter()
        .enumerate()
        .map(|(i, &c)| pt.row(i)[c].to_f64_lossy())
        .collect();
    let con_s = class
        .iter()
        .enumerate()
        .map(|(i, &c)| ps.row(i)[c].to_f64_lossy())
        .collect();
    Ok(ConfidenceStats { con_t, con_s, class })
}

fn check(stats: &ConfidenceStats, classes: usize) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::input("confidence statistics of an empty batch"));
    }
    if stats.con_s.len() != stats.len() {
        return Err(Error::input("teacher and student confidence vectors differ in length"));
    }
    if classes == 0 {
        return Err(Error::input("class count must be positive"));
    }
    Ok(())
}

/// `max(mean |con_t − con_s| · C, 1)`.
pub fn interactive_temperature(stats: &ConfidenceStats, classes: usize) -> Result<f64> {
    check(stats, classes)?;
    let tau = (stats.mean_gap() * classes as f64).max(1.0);
    debug_assert!(tau <= classes as f64 + 1e-9);
    Ok(tau)
}

/// `1 / (C · mean con_t)`, clamped to 1 against round-off below `1 / C`.
pub fn adaptive_lambda(stats: &ConfidenceStats, classes: usize) -> Result<f64> {
    check(stats, classes)?;
    let lambda = 1.0 / (classes as f64 * stats.mean_teacher_confidence());
    Ok(lambda.min(1.0))
}
