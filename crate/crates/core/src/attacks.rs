//! L∞ gradient-sign attacks: FGSM and PGD with a selectable inner loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Reduction};
use crate::error::{Error, Result};
use crate::models::{softmax_with_temperature, BnMode, Classifier};
use crate::tensor::{Scalar, Tensor};

/// Objective the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Cross-entropy against the true labels (PGD_S).
    CrossEntropy,
    /// KL of the adversarial prediction from the clean one (PGD_T).
    KlVsClean,
    /// `max_{j≠y} z_j − z_y` (CW∞).
    CwMargin,
    /// KL of the student on `x′` from the teacher on clean `x` (training attack).
    KdVsTeacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Half-width of the uniform random start; 0 disables it.
    pub random_start: f64,
    pub loss: AttackLoss,
}

impl AttackConfig {
    /// PGD-10 used to craft training examples.
    pub fn training() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: 0.001,
            loss: AttackLoss::KdVsTeacher,
        }
    }

    /// 20-step evaluation PGD with a full-ball random start.
    pub fn evaluation(loss: AttackLoss) -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 20,
            random_start: 8.0 / 255.0,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.step_size >= 0.0 && self.random_start >= 0.0) {
            return Err(Error::config(format!("attack radii must be non-negative: {self:?}")));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        if self.epsilon > 0.0 && self.step_size > self.epsilon {
            return Err(Error::config(format!(
                "step size {} exceeds epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

/// What the attack loss is measured against.
#[derive(Debug, Clone)]
pub enum AttackTarget<F> {
    Labels(Vec<usize>),
    /// Logits defining the reference distribution (clean model output or teacher output).
    Reference(Tensor<F>),
}

impl<F: Scalar> AttackTarget<F> {
    fn labels(&self) -> Result<&[usize]> {
        match self {
            AttackTarget::Labels(l) => Ok(l),
            AttackTarget::Reference(_) => Err(Error::input("this attack loss needs labels")),
        }
    }

    fn reference(&self) -> Result<&Tensor<F>> {
        match self {
            AttackTarget::Reference(r) => Ok(r),
            AttackTarget::Labels(_) => Err(Error::input("this attack loss needs reference logits")),
        }
    }
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Summed attack objective and its gradient with respect to the input.
pub fn input_gradient<F: Scalar>(
    model: &Classifier<F>,
    x: &Tensor<F>,
    target: &AttackTarget<F>,
    loss: AttackLoss,
) -> Result<(Tensor<F>, f64)> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, input, BnMode::Running, false)?.output;
    let objective = match loss {
        AttackLoss::CrossEntropy => g.cross_entropy(logits, target.labels()?, Reduction::Sum)?,
        AttackLoss::CwMargin => g.cw_margin(logits, target.labels()?, Reduction::Sum)?,
        AttackLoss::KlVsClean | AttackLoss::KdVsTeacher => {
            let reference = g.leaf(target.reference()?.clone(), false);
            g.kl_div(reference, logits, 1.0, Reduction::Sum)?
        }
    };
    let value = g.value(objective).item().to_f64_lossy();
    let mut grads = g.backward(objective)?;
    let grad = grads.take(input).unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !grad.is_finite() {
        return Err(Error::Numerical {
            location: "attack input gradient".into(),
            value: grad.data().iter().find(|v| !v.is_finite()).unwrap().to_f64_lossy(),
        });
    }
    Ok((grad, value))
}

/// Per-sample attack objective, used to check that attacks ascend.
pub fn per_sample_objective<F: Scalar>(
    model: &Classifier<F>,
    x: &Tensor<F>,
    target: &AttackTarget<F>,
    loss: AttackLoss,
) -> Result<Vec<f64>> {
    let logits = model.logits(x)?;
    let p = softmax_with_temperature(&logits, 1.0)?;
    let mut out = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let v = match loss {
            AttackLoss::CrossEntropy => -p.row(i)[target.labels()?[i]].to_f64_lossy().ln(),
            AttackLoss::CwMargin => {
                let y = target.labels()?[i];
                let other = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                other - row[y]
            }
            AttackLoss::KlVsClean | AttackLoss::KdVsTeacher => {
                let r = softmax_with_temperature(&target.reference()?.slice_batch(i, i + 1), 1.0)?;
                r.data()
                    .iter()
                    .zip(p.row(i))
                    .map(|(&a, &b)| {
                        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                        if a > 0.0 {
                            a * (a / b).ln()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Single-step `x + ε·sign(∇ CE)`, clipped to `[0, 1]`.
pub fn fgsm<F: Scalar>(model: &Classifier<F>, x: &Tensor<F>, labels: &[usize], epsilon: f64) -> Result<Tensor<F>> {
    let (grad, _) = input_gradient(model, x, &AttackTarget::Labels(labels.to_vec()), AttackLoss::CrossEntropy)?;
    let eps = F::from_f64_lossy(epsilon);
    let mut out = x.clone();
    for (o, &gi) in out.data_mut().iter_mut().zip(grad.data()) {
        *o = (*o + eps * sign(gi)).max(F::zero()).min(F::one());
    }
    Ok(out)
}

fn project<F: Scalar>(adv: &mut Tensor<F>, x: &Tensor<F>, eps: F) {
    for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.max(c - eps).min(c + eps).max(F::zero()).min(F::one());
    }
}

/// Projected gradient ascent inside the ε-ball around `x` and the `[0, 1]` box.
pub fn pgd<F: Scalar, R: Rng>(
    model: &Classifier<F>,
    x: &Tensor<F>,
    target: &AttackTarget<F>,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<F>> {
    config.validate()?;
    let eps = F::from_f64_lossy(config.epsilon);
    let step = F::from_f64_lossy(config.step_size);
    let mut adv = x.clone();
    if config.random_start > 0.0 {
        let r = config.random_start;
        for a in adv.data_mut() {
            *a += F::from_f64_lossy(rng.gen_range(-r..=r));
        }
        project(&mut adv, x, eps);
    }
    for _ in 0..config.steps {
        let (grad, _) = input_gradient(model, &adv, target, config.loss)?;
        for (a, &gi) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a += step * sign(gi);
        }
        project(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Training-time adversarial examples: PGD on the student's divergence from
/// the teacher's clean prediction.
pub fn craft_training_adversarial<F: Scalar, R: Rng>(
    student: &Classifier<F>,
    teacher: &Classifier<F>,
    x_hat: &Tensor<F>,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let reference = teacher.logits(x_hat)?;
    pgd(student, x_hat, &AttackTarget::Reference(reference), config, rng)
}
