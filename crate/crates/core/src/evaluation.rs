//! Robustness reports, teacher-entropy traces on generated data, and the
//! temperature-strategy comparison.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, AttackConfig, AttackLoss, AttackTarget};
use crate::data_io::ImageDataset;
use crate::error::{Error, Result};
use crate::losses::info_entropy;
use crate::models::{softmax_with_temperature, Classifier, ClassifierSpec, Generator, GeneratorSpec};
use crate::tensor::Tensor;
use crate::trainer::{run_dfard, RunReport, TauSchedule, TrainConfig, TrainMode, TrainState};

/// Evaluation attacks share one radius and step schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSuite {
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eps")]
    pub random_start: f64,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_eps() -> f64 {
    8.0 / 255.0
}
fn default_step() -> f64 {
    2.0 / 255.0
}
fn default_steps() -> usize {
    20
}
fn default_eval_batch() -> usize {
    200
}

impl Default for AttackSuite {
    fn default() -> Self {
        Self {
            epsilon: default_eps(),
            step_size: default_step(),
            steps: default_steps(),
            random_start: default_eps(),
            batch_size: default_eval_batch(),
        }
    }
}

impl AttackSuite {
    /// The default schedule rescaled to radius `epsilon`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            random_start: epsilon,
            ..Self::default()
        }
    }

    pub fn config(&self, loss: AttackLoss) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
            random_start: self.random_start,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("evaluation batch size must be positive"));
        }
        self.config(AttackLoss::CrossEntropy).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAttack {
    Clean,
    Fgsm,
    PgdS,
    PgdT,
    Cw,
}

impl EvalAttack {
    pub const ALL: [EvalAttack; 5] = [Self::Clean, Self::Fgsm, Self::PgdS, Self::PgdT, Self::Cw];

    fn stream(self) -> u64 {
        self as u64
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Fgsm => "fgsm",
            Self::PgdS => "pgd_s",
            Self::PgdT => "pgd_t",
            Self::Cw => "cw",
        }
    }
}

/// Accuracies in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model: String,
    pub seed: u64,
    pub suite: AttackSuite,
    pub clean: f64,
    pub fgsm: f64,
    pub pgd_s: f64,
    pub pgd_t: f64,
    pub cw: f64,
    /// Mean of the four robust accuracies; clean accuracy is not included.
    pub average: f64,
}

impl RobustnessReport {
    pub fn get(&self, attack: EvalAttack) -> f64 {
        match attack {
            EvalAttack::Clean => self.clean,
            EvalAttack::Fgsm => self.fgsm,
            EvalAttack::PgdS => self.pgd_s,
            EvalAttack::PgdT => self.pgd_t,
            EvalAttack::Cw => self.cw,
        }
    }
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "model", "clean", "fgsm", "pgd_s", "pgd_t", "cw", "avg")?;
        write!(
            f,
            "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.model, self.clean, self.fgsm, self.pgd_s, self.pgd_t, self.cw, self.average
        )
    }
}

/// Percentage of `test_set` classified correctly after `attack`.
pub fn attack_accuracy(
    model: &Classifier<f32>,
    test_set: &ImageDataset,
    suite: &AttackSuite,
    attack: EvalAttack,
    seed: u64,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::input("empty test set"));
    }
    suite.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attack.stream());
    let mut correct = 0usize;
    for (x, y) in test_set.chunks(suite.batch_size) {
        let input = match attack {
            EvalAttack::Clean => x,
            EvalAttack::Fgsm => fgsm(model, &x, &y, suite.epsilon)?,
            EvalAttack::PgdS => pgd(model, &x, &AttackTarget::Labels(y.clone()), &suite.config(AttackLoss::CrossEntropy), &mut rng)?,
            EvalAttack::PgdT => {
                let clean = model.logits(&x)?;
                pgd(model, &x, &AttackTarget::Reference(clean), &suite.config(AttackLoss::KlVsClean), &mut rng)?
            }
            EvalAttack::Cw => pgd(model, &x, &AttackTarget::Labels(y.clone()), &suite.config(AttackLoss::CwMargin), &mut rng)?,
        };
        let pred = model.logits(&input)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / test_set.len() as f64)
}

pub fn evaluate_robustness(
    model: &Classifier<f32>,
    model_id: &str,
    test_set: &ImageDataset,
    suite: &AttackSuite,
    seed: u64,
) -> Result<RobustnessReport> {
    let mut acc = [0.0; 5];
    for (slot, attack) in acc.iter_mut().zip(EvalAttack::ALL) {
        *slot = attack_accuracy(model, test_set, suite, attack, seed)?;
    }
    Ok(RobustnessReport {
        model: model_id.to_string(),
        seed,
        suite: suite.clone(),
        clean: acc[0],
        fgsm: acc[1],
        pgd_s: acc[2],
        pgd_t: acc[3],
        cw: acc[4],
        average: acc[1..].iter().sum::<f64>() / 4.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub per_batch: Vec<f64>,
    pub mean: f64,
}

/// Mean entropy of the teacher's predictions on freshly generated batches
/// with uniformly drawn labels.
pub fn entropy_report(
    teacher: &Classifier<f32>,
    generator: &Generator<f32>,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<EntropyTrace> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::input("entropy report needs at least one non-empty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = generator.spec();
    let mut per_batch = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let z = Tensor::from_fn(&[batch_size, spec.latent_dim], |_| {
            <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng)
        });
        let y: Vec<usize> = (0..batch_size)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..spec.num_classes))
            .collect();
        let x = generator.generate(&z, &y)?;
        let probs = softmax_with_temperature(&teacher.logits(&x)?, 1.0)?;
        per_batch.push(info_entropy(&probs)?.mean);
    }
    let mean = per_batch.iter().sum::<f64>() / n_batches as f64;
    Ok(EntropyTrace { per_batch, mean })
}

/// One arm of the temperature-strategy comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempStrategy {
    StepDecrease,
    StepIncrease,
    Constant,
    Interactive,
}

impl TempStrategy {
    pub const ALL: [TempStrategy; 4] = [Self::StepDecrease, Self::StepIncrease, Self::Constant, Self::Interactive];

    pub fn schedule(self) -> TauSchedule {
        match self {
            Self::StepDecrease => TauSchedule::Steps { values: [5.0, 3.0, 1.0] },
            Self::StepIncrease => TauSchedule::Steps { values: [1.0, 3.0, 5.0] },
            Self::Constant => TauSchedule::Steps { values: [3.0, 3.0, 3.0] },
            Self::Interactive => TauSchedule::Interactive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: TempStrategy,
    pub seed: u64,
    pub best_pgd_t: f64,
    /// Mean recorded temperature per epoch.
    pub tau_by_epoch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempExperimentReport {
    pub results: Vec<StrategyResult>,
}

impl TempExperimentReport {
    pub fn best(&self, strategy: TempStrategy, seed: u64) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.strategy == strategy && r.seed == seed)
            .map(|r| r.best_pgd_t)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }
}

/// Everything a distillation run needs besides its hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct DistillSetup<'a> {
    pub teacher: &'a Classifier<f32>,
    pub student: &'a ClassifierSpec,
    pub generator: &'a GeneratorSpec,
    pub eval_set: &'a ImageDataset,
    pub eval_suite: &'a AttackSuite,
}

/// Trains one student per strategy and seed under a fixed generator
/// balance and reports each run's best PGD_T accuracy.
pub fn temperature_strategy_experiment(
    base: &TrainConfig,
    setup: DistillSetup<'_>,
    seeds: &[u64],
) -> Result<TempExperimentReport> {
    let mut results = Vec::new();
    for &seed in seeds {
        for strategy in TempStrategy::ALL {
            let config = TrainConfig {
                mode: TrainMode::Vanilla,
                tau_schedule: Some(strategy.schedule()),
                seed,
                ..base.clone()
            };
            let (state, report) = distill(&config, setup)?;
            results.push(StrategyResult {
                strategy,
                seed,
                best_pgd_t: report.best_pgd_t.unwrap_or(f64::NAN),
                tau_by_epoch: state.history.epoch_means(|r| Some(r.tau_tilde)),
            });
        }
    }
    Ok(TempExperimentReport { results })
}

/// Fresh state plus a complete run.
pub fn distill(config: &TrainConfig, setup: DistillSetup<'_>) -> Result<(TrainState, RunReport)> {
    let mut state = TrainState::new(config, setup.student.clone(), setup.generator.clone())?;
    let report = run_dfard(config, setup.teacher, &mut state, Some((setup.eval_set, setup.eval_suite)), config.epochs)?;
    Ok((state, report))
}
