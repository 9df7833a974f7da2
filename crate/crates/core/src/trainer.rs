//! The two-stage data-free distillation loop, its fixed-hyperparameter
//! baseline, and robust teacher pre-training.
//!
//! Each epoch runs `gen_iters` generator updates followed by `student_iters`
//! student updates. The temperature and generator balance are recomputed for
//! every batch from the teacher and student confidences on that batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_lambda, confidence_stats, interactive_temperature};
use crate::attacks::{pgd, AttackConfig, AttackLoss, AttackTarget};
use crate::autograd::{Graph, Reduction};
use crate::data_io::checkpoint::{prefixed, Checkpoint, CheckpointMeta};
use crate::data_io::ImageDataset;
use crate::error::{Error, Result};
use crate::evaluation::{attack_accuracy, AttackSuite, EvalAttack};
use crate::losses::{adv_gen_loss, cls_loss, gen_loss, info_entropy, kd_loss};
use crate::models::{softmax_with_temperature, BnMode, Classifier, ClassifierSpec, Generator, GeneratorSpec};
use crate::optim::{cosine_lr, Adam, OptimizerState, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Interactive temperature in both stages, adaptive generator balance.
    Adaptive,
    /// Fixed temperature and balance.
    Vanilla,
    /// Adaptive generator stage; fixed temperature for the student.
    ItaGenOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Conditioning labels are the class-fit targets.
    Random,
    /// The teacher's own prediction on the generated batch is the class-fit target.
    Pseudo,
}

/// Temperature override for the schedule comparison; vanilla mode only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauSchedule {
    /// Piecewise constant, switching at 30% and 70% of the run.
    Steps { values: [f64; 3] },
    Interactive,
}

impl TauSchedule {
    pub const BREAKS: [f64; 2] = [0.3, 0.7];

    pub fn fixed_at(&self, epoch: usize, total: usize) -> Option<f64> {
        match self {
            TauSchedule::Steps { values } => {
                let progress = epoch as f64 / total.max(1) as f64;
                let i = Self::BREAKS.iter().filter(|&&b| progress >= b).count();
                Some(values[i])
            }
            TauSchedule::Interactive => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub gen_iters: usize,
    pub student_iters: usize,
    pub batch_size: usize,
    pub student_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gen_lr: f64,
    pub gen_beta1: f64,
    pub gen_beta2: f64,
    pub attack: AttackConfig,
    pub mode: TrainMode,
    pub vanilla_tau: Option<f64>,
    pub vanilla_lambda: Option<f64>,
    pub tau_schedule: Option<TauSchedule>,
    pub label_source: LabelSource,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            gen_iters: 1,
            student_iters: 5,
            batch_size: 256,
            student_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            gen_lr: 1e-3,
            gen_beta1: 0.5,
            gen_beta2: 0.999,
            attack: AttackConfig::training(),
            mode: TrainMode::Adaptive,
            vanilla_tau: Some(3.0),
            vanilla_lambda: Some(0.3),
            tau_schedule: None,
            label_source: LabelSource::Random,
            eval_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("gen_iters", self.gen_iters),
            ("student_iters", self.student_iters),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be at least 1")));
            }
        }
        if !(self.student_lr >= 0.0 && self.gen_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.gen_beta1) || !(0.0..1.0).contains(&self.gen_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        self.attack.validate()?;
        let needs_fixed = self.mode != TrainMode::Adaptive;
        if needs_fixed {
            let tau = self
                .vanilla_tau
                .ok_or_else(|| Error::config("train.vanilla_tau is required in this mode"))?;
            if !(tau >= 1.0) {
                return Err(Error::config(format!("train.vanilla_tau must be >= 1, got {tau}")));
            }
        }
        if self.mode == TrainMode::Vanilla {
            let lambda = self
                .vanilla_lambda
                .ok_or_else(|| Error::config("train.vanilla_lambda is required in vanilla mode"))?;
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(Error::config(format!("train.vanilla_lambda must lie in (0, 1], got {lambda}")));
            }
        }
        if let Some(s) = &self.tau_schedule {
            if self.mode != TrainMode::Vanilla {
                return Err(Error::config("train.tau_schedule requires vanilla mode"));
            }
            if let TauSchedule::Steps { values } = s {
                if values.iter().any(|&t| !(t >= 1.0)) {
                    return Err(Error::config("scheduled temperatures must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// One row of the metric history. Generator rows leave `loss_kd` empty and
/// student rows leave the generator losses empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    /// Iteration index within the epoch; generator iterations come first.
    pub batch: usize,
    pub tau_tilde: f64,
    pub lambda: f64,
    pub loss_cls: Option<f64>,
    pub loss_adv: Option<f64>,
    pub loss_gen: Option<f64>,
    pub loss_kd: Option<f64>,
    pub teacher_entropy: f64,
    pub student_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub pgd_t: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<BatchRecord>,
    pub evals: Vec<EvalPoint>,
}

impl History {
    /// Per-epoch mean of `f` over the rows where it is defined.
    pub fn epoch_means(&self, f: impl Fn(&BatchRecord) -> Option<f64>) -> Vec<f64> {
        let epochs = self.records.last().map_or(0, |r| r.epoch + 1);
        let mut sums = vec![(0.0, 0usize); epochs];
        for r in &self.records {
            if let Some(v) = f(r) {
                sums[r.epoch].0 += v;
                sums[r.epoch].1 += 1;
            }
        }
        sums.into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect()
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub student: Classifier<f32>,
    pub generator: Generator<f32>,
    pub student_opt: Sgd<f32>,
    pub gen_opt: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub history: History,
    pub best: Option<(EvalPoint, Classifier<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    rng: ChaCha8Rng,
    student_opt_steps: u64,
    gen_opt_steps: u64,
    history: History,
    best: Option<EvalPoint>,
}

impl TrainState {
    /// Models are initialised from streams derived from the run seed.
    pub fn new(config: &TrainConfig, student: ClassifierSpec, generator: GeneratorSpec) -> Result<Self> {
        config.validate()?;
        if student.num_classes != generator.num_classes {
            return Err(Error::config(format!(
                "student has {} classes but generator conditions on {}",
                student.num_classes, generator.num_classes
            )));
        }
        if student.image_size != generator.image_size() || student.in_channels != generator.out_channels {
            return Err(Error::config(format!(
                "generator emits {}x{}x{} images but the student expects {}x{}x{}",
                generator.out_channels,
                generator.image_size(),
                generator.image_size(),
                student.in_channels,
                student.image_size,
                student.image_size
            )));
        }
        let student = Classifier::new(student, config.seed.wrapping_mul(3).wrapping_add(1))?;
        let generator = Generator::new(generator, config.seed.wrapping_mul(3).wrapping_add(2))?;
        let student_opt = Sgd::new(student.params(), config.momentum, config.weight_decay);
        let gen_opt = Adam::new(generator.params(), config.gen_lr, config.gen_beta1, config.gen_beta2);
        Ok(Self {
            epoch: 0,
            student,
            generator,
            student_opt,
            gen_opt,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: History::default(),
            best: None,
        })
    }

    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Result<Checkpoint> {
        let meta = StateMeta {
            epoch: self.epoch,
            rng: self.rng.clone(),
            student_opt_steps: self.student_opt.state().steps,
            gen_opt_steps: self.gen_opt.state().steps,
            history: self.history.clone(),
            best: self.best.as_ref().map(|(p, _)| p.clone()),
        };
        let mut tensors: Vec<(String, Tensor<f32>)> = prefixed("student", self.student.named_tensors()).collect();
        tensors.extend(prefixed("generator", self.generator.named_tensors()));
        tensors.extend(prefixed("student_opt", self.student_opt.state().tensors));
        tensors.extend(prefixed("gen_opt", self.gen_opt.state().tensors));
        if let Some((_, best)) = &self.best {
            tensors.extend(prefixed("best", best.named_tensors()));
        }
        Ok(Checkpoint {
            descriptor: format!(
                "train_state({};{})",
                self.student.spec().descriptor(),
                self.generator.spec().descriptor()
            ),
            meta: CheckpointMeta {
                seed,
                epoch: self.epoch,
                config_hash: config_hash.to_string(),
                extra: serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            },
            tensors,
        })
    }

    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        config: &TrainConfig,
        student: ClassifierSpec,
        generator: GeneratorSpec,
    ) -> Result<Self> {
        let mut state = Self::new(config, student, generator)?;
        let expected = format!(
            "train_state({};{})",
            state.student.spec().descriptor(),
            state.generator.spec().descriptor()
        );
        if ckpt.descriptor != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint holds {}, run expects {expected}",
                ckpt.descriptor
            )));
        }
        let meta: StateMeta = serde_json::from_value(ckpt.meta.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("training-state metadata: {e}")))?;
        state.student.load_named(&ckpt.group("student"))?;
        state.generator.load_named(&ckpt.group("generator"))?;
        state.student_opt.load_state(OptimizerState {
            steps: meta.student_opt_steps,
            tensors: ckpt.group("student_opt"),
        })?;
        state.gen_opt.load_state(OptimizerState {
            steps: meta.gen_opt_steps,
            tensors: ckpt.group("gen_opt"),
        })?;
        state.best = match meta.best {
            Some(point) => {
                let mut best = state.student.clone();
                best.load_named(&ckpt.group("best"))?;
                Some((point, best))
            }
            None => None,
        };
        state.epoch = meta.epoch;
        state.rng = meta.rng;
        state.history = meta.history;
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Generation,
    Distillation,
}

/// Temperature and balance in force for a batch.
fn hyperparameters(
    config: &TrainConfig,
    stage: Stage,
    epoch: usize,
    teacher_logits: &Tensor<f32>,
    student_logits: &Tensor<f32>,
) -> Result<(f64, f64)> {
    let classes = teacher_logits.row_len();
    let stats = confidence_stats(teacher_logits, student_logits)?;
    let ita = interactive_temperature(&stats, classes)?;
    let agb = adaptive_lambda(&stats, classes)?;
    let fixed_tau = config.vanilla_tau.unwrap_or(1.0);
    let fixed_lambda = config.vanilla_lambda.unwrap_or(1.0);
    Ok(match config.mode {
        TrainMode::Adaptive => (ita, agb),
        TrainMode::Vanilla => {
            let tau = match config.tau_schedule {
                Some(s) => s.fixed_at(epoch, config.epochs).unwrap_or(ita),
                None => fixed_tau,
            };
            (tau, fixed_lambda)
        }
        TrainMode::ItaGenOnly => match stage {
            Stage::Generation => (ita, agb),
            Stage::Distillation => (fixed_tau, agb),
        },
    })
}

fn sample_inputs(rng: &mut ChaCha8Rng, spec: &GeneratorSpec, batch: usize) -> (Tensor<f32>, Vec<usize>) {
    let z = Tensor::from_fn(&[batch, spec.latent_dim], |_| {
        <StandardNormal as Distribution<f32>>::sample(&StandardNormal, rng)
    });
    let y = (0..batch).map(|_| rng.gen_range(0..spec.num_classes)).collect();
    (z, y)
}

fn require_frozen(teacher: &Classifier<f32>) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(Error::config("the teacher must be frozen before distillation"));
    }
    Ok(())
}

fn teacher_entropy(teacher_logits: &Tensor<f32>) -> Result<f64> {
    Ok(info_entropy(&softmax_with_temperature(teacher_logits, 1.0)?)?.mean)
}

/// Generator updates for one epoch. The state is left untouched by an
/// iteration whose loss or gradients are non-finite.
pub fn generation_stage(state: &mut TrainState, teacher: &Classifier<f32>, config: &TrainConfig) -> Result<()> {
    require_frozen(teacher)?;
    let epoch = state.epoch;
    let lr = cosine_lr(config.student_lr, epoch, config.epochs);
    for it in 0..config.gen_iters {
        let (z, y) = sample_inputs(&mut state.rng, state.generator.spec(), config.batch_size);
        let mut g = Graph::new();
        let gen = state.generator.forward(&mut g, &z, &y, true)?;
        g.set_label(gen.output, "generator output");
        let t = teacher.forward(&mut g, gen.output, BnMode::Running, false)?.output;
        let s = state.student.forward(&mut g, gen.output, BnMode::Running, false)?.output;
        let (t_val, s_val) = (g.value(t).clone(), g.value(s).clone());
        let (tau, lambda) = hyperparameters(config, Stage::Generation, epoch, &t_val, &s_val)?;
        let targets = match config.label_source {
            LabelSource::Random => y,
            LabelSource::Pseudo => t_val.argmax_rows(),
        };
        let cls = cls_loss(&mut g, t, &targets)?;
        let adv = adv_gen_loss(&mut g, t, s, tau)?;
        let total = gen_loss(&mut g, &cls, &adv, lambda)?;
        let grads = g.backward(total.var)?;
        let grads = state.generator.param_grads(&grads, &gen);
        state.gen_opt.step(state.generator.params_mut(), &grads)?;
        state.history.records.push(BatchRecord {
            epoch,
            batch: it,
            tau_tilde: tau,
            lambda,
            loss_cls: Some(cls.value.value),
            loss_adv: Some(adv.value.value),
            loss_gen: Some(total.value.value),
            loss_kd: None,
            teacher_entropy: teacher_entropy(&t_val)?,
            student_lr: lr,
        });
    }
    Ok(())
}

/// Student updates for one epoch on adversarial examples of generated data.
pub fn distillation_stage(state: &mut TrainState, teacher: &Classifier<f32>, config: &TrainConfig) -> Result<()> {
    require_frozen(teacher)?;
    let epoch = state.epoch;
    let lr = cosine_lr(config.student_lr, epoch, config.epochs);
    for it in 0..config.student_iters {
        let (z, y) = sample_inputs(&mut state.rng, state.generator.spec(), config.batch_size);
        let x_hat = state.generator.generate(&z, &y)?;
        let t_clean = teacher.logits(&x_hat)?;
        let s_clean = state.student.logits(&x_hat)?;
        let (tau, lambda) = hyperparameters(config, Stage::Distillation, epoch, &t_clean, &s_clean)?;
        let entropy = teacher_entropy(&t_clean)?;
        let attack = AttackConfig {
            loss: AttackLoss::KdVsTeacher,
            ..config.attack.clone()
        };
        let x_adv = pgd(&state.student, &x_hat, &AttackTarget::Reference(t_clean), &attack, &mut state.rng)?;

        let mut g = Graph::new();
        let t_adv = g.leaf(teacher.logits(&x_adv)?, false);
        let input = g.leaf(x_adv, false);
        let pass = state.student.forward(&mut g, input, BnMode::Batch, true)?;
        let kd = kd_loss(&mut g, t_adv, pass.output, tau)?;
        let grads = g.backward(kd.var)?;
        let grads = state.student.param_grads(&grads, &pass)?;
        state.student_opt.step(state.student.params_mut()?, &grads, lr)?;
        state.student.update_running_stats(&g, &pass)?;
        state.history.records.push(BatchRecord {
            epoch,
            batch: config.gen_iters + it,
            tau_tilde: tau,
            lambda,
            loss_cls: None,
            loss_adv: None,
            loss_gen: None,
            loss_kd: Some(kd.value.value),
            teacher_entropy: entropy,
            student_lr: lr,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs_completed: usize,
    pub best_epoch: Option<usize>,
    pub best_pgd_t: Option<f64>,
    pub evals: Vec<EvalPoint>,
}

fn is_eval_epoch(config: &TrainConfig, epoch: usize) -> bool {
    (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs
}

/// Continues `state` until `until` epochs are complete (capped at the
/// configured total), evaluating PGD_T accuracy on the cadence and keeping
/// the best student. Splitting a run at any epoch and resuming from a
/// serialised state gives the same result as running it straight through.
pub fn run_dfard(
    config: &TrainConfig,
    teacher: &Classifier<f32>,
    state: &mut TrainState,
    eval: Option<(&ImageDataset, &AttackSuite)>,
    until: usize,
) -> Result<RunReport> {
    run_dfard_with(config, teacher, state, eval, until, |_| Ok(()))
}

/// As [`run_dfard`], calling `after_epoch` once each epoch is complete.
pub fn run_dfard_with(
    config: &TrainConfig,
    teacher: &Classifier<f32>,
    state: &mut TrainState,
    eval: Option<(&ImageDataset, &AttackSuite)>,
    until: usize,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<RunReport> {
    config.validate()?;
    require_frozen(teacher)?;
    let until = until.min(config.epochs);
    while state.epoch < until {
        generation_stage(state, teacher, config)?;
        distillation_stage(state, teacher, config)?;
        let epoch = state.epoch;
        if let Some((data, suite)) = eval {
            if is_eval_epoch(config, epoch) {
                let seed = config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let pgd_t = attack_accuracy(&state.student, data, suite, EvalAttack::PgdT, seed)?;
                let point = EvalPoint { epoch, pgd_t };
                state.history.evals.push(point.clone());
                if state.best.as_ref().map_or(true, |(b, _)| pgd_t > b.pgd_t) {
                    state.best = Some((point, state.student.clone()));
                }
            }
        }
        state.epoch += 1;
        after_epoch(state)?;
    }
    Ok(RunReport {
        epochs_completed: state.epoch,
        best_epoch: state.best.as_ref().map(|(p, _)| p.epoch),
        best_pgd_t: state.best.as_ref().map(|(p, _)| p.pgd_t),
        evals: state.history.evals.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Training attack; its loss is always cross-entropy.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig {
                epsilon: 8.0 / 255.0,
                step_size: 2.0 / 255.0,
                steps: 10,
                random_start: 8.0 / 255.0,
                loss: AttackLoss::CrossEntropy,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub epoch_losses: Vec<f64>,
    pub clean_accuracy: f64,
    pub pgd20_accuracy: f64,
}

/// Madry-style adversarial training: every batch is replaced by its PGD
/// adversarial examples under cross-entropy. With `epsilon == 0` this is
/// plain training. Aborts if the epoch loss stays above ten times the first
/// epoch's for three consecutive epochs.
pub fn pretrain_robust_teacher(
    train: &ImageDataset,
    test: &ImageDataset,
    spec: &ClassifierSpec,
    config: &TeacherConfig,
    suite: &AttackSuite,
) -> Result<(Classifier<f32>, TeacherReport)> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::config("teacher epochs and batch size must be at least 1"));
    }
    if train.num_classes != spec.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes but the teacher has {}",
            train.num_classes, spec.num_classes
        )));
    }
    let attack = AttackConfig {
        loss: AttackLoss::CrossEntropy,
        ..config.attack.clone()
    };
    attack.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Classifier::new(spec.clone(), config.seed.wrapping_add(17))?;
    let mut opt = Sgd::new(model.params(), config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut diverging = 0;
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr, epoch, config.epochs);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train.batch(chunk);
            let x = if attack.epsilon > 0.0 {
                pgd(&model, &x, &AttackTarget::Labels(y.clone()), &attack, &mut rng)?
            } else {
                x
            };
            let mut g = Graph::new();
            let input = g.leaf(x, false);
            let pass = model.forward(&mut g, input, BnMode::Batch, true)?;
            let loss = g.cross_entropy(pass.output, &y, Reduction::Mean)?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            let grads = model.param_grads(&grads, &pass)?;
            opt.step(model.params_mut()?, &grads, lr)?;
            model.update_running_stats(&g, &pass)?;
            total += value * y.len() as f64;
            count += y.len();
        }
        let mean = total / count as f64;
        epoch_losses.push(mean);
        if mean > 10.0 * epoch_losses[0] {
            diverging += 1;
            if diverging >= 3 {
                return Err(Error::Numerical {
                    location: format!("teacher training diverged at epoch {epoch}"),
                    value: mean,
                });
            }
        } else {
            diverging = 0;
        }
    }
    model.freeze();
    let clean_accuracy = attack_accuracy(&model, test, suite, EvalAttack::Clean, config.seed)?;
    let pgd20_accuracy = attack_accuracy(&model, test, suite, EvalAttack::PgdS, config.seed)?;
    Ok((
        model,
        TeacherReport {
            epoch_losses,
            clean_accuracy,
            pgd20_accuracy,
        },
    ))
}
