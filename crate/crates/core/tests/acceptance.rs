//! Acceptance suite. Prints one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g. `cargo test --test acceptance -- 1 2 5`.
//!
//! Contract criteria (exact formulas, gradients, attacks, overhead,
//! determinism) fail the process. Empirical desk-scale outcomes (6-8) are
//! reported with their measured values either way; set
//! `DFARD_STRICT_ACCEPTANCE=1` to make their failures fatal too.
//!
//! The robust teacher for criteria 6-9 is trained once and cached under the
//! cargo target tmpdir, keyed by the hash of its configuration.

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dfard::adaptive::{adaptive_lambda, confidence_stats, interactive_temperature, ConfidenceStats};
use dfard::attacks::{fgsm, pgd, AttackConfig, AttackLoss, AttackTarget};
use dfard::autograd::{Graph, Var};
use dfard::config::ExperimentConfig;
use dfard::data_io::checkpoint::{
    classifier_checkpoint, classifier_from_checkpoint, decode, encode, CheckpointMeta,
};
use dfard::data_io::{load_checkpoint, save_checkpoint, ImageDataset};
use dfard::evaluation::{distill, evaluate_robustness, temperature_strategy_experiment, DistillSetup, TempStrategy};
use dfard::losses::{adv_gen_loss, cls_loss, gen_loss, info_entropy, kd_loss};
use dfard::metrics::write_metrics_csv;
use dfard::models::{BnMode, Classifier, ClassifierSpec, Generator, GeneratorSpec, Pass};
use dfard::trainer::{
    distillation_stage, generation_stage, pretrain_robust_teacher, run_dfard, TeacherReport, TrainConfig,
    TrainMode, TrainState,
};
use dfard::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DESK_CONFIG: &str = include_str!("../configs/desk.toml");

/// Epochs of the end-to-end adaptive run.
const E2E_EPOCHS: usize = 60;
/// Epochs of each run in the ablation and schedule comparisons.
const COMPARISON_EPOCHS: usize = 20;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1, 2, 5: closed-form rules

fn random_stats(rng: &mut ChaCha8Rng, classes: usize) -> ConfidenceStats {
    let n = rng.gen_range(1..64);
    let con_t: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0 / classes as f64..=1.0)).collect();
    let con_s = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let class = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    ConfidenceStats { con_t, con_s, class }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let classes = rng.gen_range(2..=100);
        let s = random_stats(&mut rng, classes);
        let gap: f64 = s.con_t.iter().zip(&s.con_s).map(|(t, c)| (t - c).abs()).sum::<f64>() / s.len() as f64;
        let oracle = (gap * classes as f64).max(1.0);
        worst = worst.max((interactive_temperature(&s, classes).unwrap() - oracle).abs());
    }
    let mut endpoint_ok = true;
    for _ in 0..100 {
        let mut s = random_stats(&mut rng, 10);
        s.con_s = s.con_t.clone();
        endpoint_ok &= interactive_temperature(&s, 10).unwrap() == 1.0;
    }
    outcome(
        worst <= 1e-6 && endpoint_ok,
        format!("max |tau - oracle| = {worst:.2e} over 1000 batches; equal confidences give exactly 1: {endpoint_ok}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let classes = rng.gen_range(2..=100);
        let s = random_stats(&mut rng, classes);
        let mean = s.con_t.iter().sum::<f64>() / s.len() as f64;
        let oracle = 1.0 / (classes as f64 * mean);
        worst = worst.max((adaptive_lambda(&s, classes).unwrap() - oracle).abs());
    }
    // uniform teacher outputs, from logits
    let uniform = Tensor::<f64>::zeros(&[5, 10]);
    let s = confidence_stats(&uniform, &uniform).unwrap();
    let uniform_lambda = adaptive_lambda(&s, 10).unwrap();
    // bound over random logits
    let mut bound_ok = true;
    for _ in 0..100_000 {
        let classes = rng.gen_range(2..=20);
        let rows = rng.gen_range(1..=4);
        let scale = rng.gen_range(0.0..40.0);
        let t = Tensor::<f64>::from_fn(&[rows, classes], |_| rng.gen_range(-scale..=scale));
        let s = confidence_stats(&t, &t).unwrap();
        let l = adaptive_lambda(&s, classes).unwrap();
        bound_ok &= l > 0.0 && l <= 1.0;
    }
    outcome(
        worst <= 1e-6 && uniform_lambda == 1.0 && bound_ok,
        format!(
            "max |lambda - oracle| = {worst:.2e}; uniform teacher lambda = {uniform_lambda}; 0 < lambda <= 1 on 1e5 batches: {bound_ok}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let one_hot = Tensor::<f64>::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let h_one_hot = info_entropy(&one_hot).unwrap().mean;
    let uniform = Tensor::<f64>::full(&[1, 7], 1.0 / 7.0);
    let h_uniform = info_entropy(&uniform).unwrap().mean;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c = rng.gen_range(2..=50);
        let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powi(3)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut oracle = 0.0;
        for &q in &p {
            if q > 0.0 {
                oracle += -q * q.ln();
            }
        }
        let got = info_entropy(&Tensor::new(vec![1, c], p).unwrap()).unwrap().mean;
        worst = worst.max((got - oracle).abs());
    }
    let uniform_err = (h_uniform - 7f64.ln()).abs();
    outcome(
        h_one_hot == 0.0 && uniform_err < 1e-12 && worst <= 1e-9,
        format!("one-hot H = {h_one_hot}; |H(uniform) - ln C| = {uniform_err:.1e}; max oracle error {worst:.2e} on 1e4 rows"),
    )
}

// ---------------------------------------------------------------------------
// 3: finite-difference gradient oracle in f64

fn tiny_classifier(seed: u64) -> Classifier<f64> {
    let spec = ClassifierSpec {
        in_channels: 1,
        image_size: 8,
        width: 2,
        stages: 2,
        num_classes: 3,
        batch_norm: true,
    };
    let mut m = Classifier::<f64>::new(spec, seed).unwrap();
    // non-trivial running statistics so running-mode layers are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut named = m.named_tensors();
    for (name, t) in named.iter_mut() {
        if name.ends_with("running_mean") {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.3..0.3));
        } else if name.ends_with("running_var") {
            *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(0.5..2.0));
        }
    }
    m.load_named(&named).unwrap();
    m
}

fn tiny_generator(seed: u64) -> Generator<f64> {
    let spec = GeneratorSpec {
        latent_dim: 4,
        num_classes: 3,
        base_size: 2,
        channels: [4, 4, 4],
        out_channels: 1,
    };
    Generator::new(spec, seed).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Loss {
    Cls,
    Adv,
    Kd,
    Gen,
}

struct Instance {
    generator: Generator<f64>,
    teacher: Classifier<f64>,
    student: Classifier<f64>,
    z: Tensor<f64>,
    labels: Vec<usize>,
    images: Tensor<f64>,
    tau: f64,
    lambda: f64,
}

impl Instance {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 4;
        let mut teacher = tiny_classifier(seed * 3 + 1);
        teacher.freeze();
        Self {
            generator: tiny_generator(seed * 3),
            teacher,
            student: tiny_classifier(seed * 3 + 2),
            z: Tensor::from_fn(&[batch, 4], |_| rng.gen_range(-1.5..1.5)),
            labels: (0..batch).map(|_| rng.gen_range(0..3)).collect(),
            images: Tensor::from_fn(&[batch, 1, 8, 8], |_| rng.gen_range(0.0..1.0)),
            tau: rng.gen_range(1.0..5.0),
            lambda: rng.gen_range(0.05..1.0),
        }
    }

    /// Loss value, kink signature, and the pass holding the differentiated parameters.
    fn evaluate(&self, loss: Loss, g: &mut Graph<f64>) -> (Var, Pass) {
        match loss {
            Loss::Kd => {
                let x = g.leaf(self.images.clone(), false);
                let t = g.leaf(self.teacher.logits(&self.images).unwrap(), false);
                let pass = self.student.forward(g, x, BnMode::Batch, true).unwrap();
                let l = kd_loss(g, t, pass.output, self.tau).unwrap();
                (l.var, pass)
            }
            _ => {
                let pass = self.generator.forward(g, &self.z, &self.labels, true).unwrap();
                let t = self.teacher.forward(g, pass.output, BnMode::Running, false).unwrap().output;
                let s = self.student.forward(g, pass.output, BnMode::Running, false).unwrap().output;
                let var = match loss {
                    Loss::Cls => cls_loss(g, t, &self.labels).unwrap().var,
                    Loss::Adv => adv_gen_loss(g, t, s, self.tau).unwrap().var,
                    _ => {
                        let c = cls_loss(g, t, &self.labels).unwrap();
                        let a = adv_gen_loss(g, t, s, self.tau).unwrap();
                        gen_loss(g, &c, &a, self.lambda).unwrap().var
                    }
                };
                (var, pass)
            }
        }
    }

    fn with_param(&self, loss: Loss, index: (usize, usize), value: f64) -> Self {
        let mut other = Self {
            generator: self.generator.clone(),
            teacher: self.teacher.clone(),
            student: self.student.clone(),
            z: self.z.clone(),
            labels: self.labels.clone(),
            images: self.images.clone(),
            tau: self.tau,
            lambda: self.lambda,
        };
        let params = match loss {
            Loss::Kd => other.student.params_mut().unwrap(),
            _ => other.generator.params_mut(),
        };
        params[index.0].value.data_mut()[index.1] = value;
        other
    }

    fn value(&self, loss: Loss) -> (f64, u64) {
        let mut g = Graph::new();
        let (v, _) = self.evaluate(loss, &mut g);
        (g.value(v).item(), g.kink_signature())
    }
}

/// Returns (max relative error, checked entries, skipped entries).
fn gradient_check(loss: Loss, seed: u64) -> (f64, usize, usize) {
    const H: f64 = 1e-5;
    let inst = Instance::new(seed);
    let mut g = Graph::new();
    let (var, pass) = inst.evaluate(loss, &mut g);
    let signature = g.kink_signature();
    let grads = g.backward(var).unwrap();
    let analytic = match loss {
        Loss::Kd => inst.student.param_grads(&grads, &pass).unwrap(),
        _ => inst.generator.param_grads(&grads, &pass),
    };
    let params = match loss {
        Loss::Kd => inst.student.params(),
        _ => inst.generator.params(),
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.value.numel() {
            let w = p.value.data()[k];
            let (plus, sig_p) = inst.with_param(loss, (pi, k), w + H).value(loss);
            let (minus, sig_m) = inst.with_param(loss, (pi, k), w - H).value(loss);
            if sig_p != signature || sig_m != signature {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked, skipped)
}

fn criterion_3() -> Outcome {
    let gen_params = tiny_generator(0).num_params();
    let cls_params = tiny_classifier(0).num_params();
    let mut pass = gen_params <= 1000 && cls_params <= 1000;
    let mut parts = vec![format!("generator {gen_params} params, classifier {cls_params} params")];
    for loss in [Loss::Cls, Loss::Adv, Loss::Kd, Loss::Gen] {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for seed in 0..20 {
            let (w, c, s) = gradient_check(loss, 100 + seed);
            worst = worst.max(w);
            checked += c;
            skipped += s;
        }
        pass &= worst < 1e-5 && checked > 0;
        parts.push(format!("{loss:?}: max rel err {worst:.2e} ({checked} checked, {skipped} kink-skipped)"));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 4: attack contracts

fn criterion_4() -> Outcome {
    let spec = ClassifierSpec {
        in_channels: 3,
        image_size: 8,
        width: 4,
        stages: 2,
        num_classes: 5,
        batch_norm: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let models: Vec<Classifier<f32>> = (0..4).map(|s| Classifier::new(spec.clone(), s).unwrap()).collect();
    let mut violations = 0usize;
    let mut worst_excess = 0.0f64;
    for run in 0..1000 {
        let model = &models[run % models.len()];
        let n = rng.gen_range(1..=4);
        let x = Tensor::<f32>::from_fn(&[n, 3, 8, 8], |_| {
            // include saturated pixels so the box constraint binds
            match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..1.0),
            }
        });
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
        let eps = rng.gen_range(0.0..0.1);
        let adv = if run % 4 == 0 {
            fgsm(model, &x, &labels, eps).unwrap()
        } else {
            let loss = [AttackLoss::CrossEntropy, AttackLoss::KlVsClean, AttackLoss::CwMargin][run % 3];
            let target = match loss {
                AttackLoss::KlVsClean => AttackTarget::Reference(model.logits(&x).unwrap()),
                _ => AttackTarget::Labels(labels.clone()),
            };
            let config = AttackConfig {
                epsilon: eps,
                step_size: eps * rng.gen_range(0.1..1.0),
                steps: rng.gen_range(1..=5),
                random_start: if rng.gen_bool(0.5) { eps } else { 0.0 },
                loss,
            };
            pgd(model, &x, &target, &config, &mut rng).unwrap()
        };
        for (&a, &c) in adv.data().iter().zip(x.data()) {
            let excess = ((a - c).abs() as f64 - eps).max(0.0);
            worst_excess = worst_excess.max(excess);
            if !(0.0..=1.0).contains(&a) || excess > 1e-6 {
                violations += 1;
            }
        }
    }
    // PGD with one full-size step and no random start is FGSM
    let mut bitwise = true;
    for (i, model) in models.iter().enumerate() {
        let x = Tensor::<f32>::from_fn(&[6, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        let eps = 8.0 / 255.0;
        let f = fgsm(model, &x, &labels, eps).unwrap();
        let config = AttackConfig {
            epsilon: eps,
            step_size: eps,
            steps: 1,
            random_start: 0.0,
            loss: AttackLoss::CrossEntropy,
        };
        let p = pgd(model, &x, &AttackTarget::Labels(labels), &config, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        bitwise &= f.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(
        violations == 0 && bitwise,
        format!("1000 runs, {violations} ball/box violations (max excess {worst_excess:.1e}); PGD-1 bitwise equal to FGSM: {bitwise}"),
    )
}

// ---------------------------------------------------------------------------
// Desk-scale context shared by 6-10

struct Desk {
    config: ExperimentConfig,
    test: ImageDataset,
    teacher: Classifier<f32>,
    teacher_report: TeacherReport,
    teacher_cached: bool,
}

impl Desk {
    fn setup(&self) -> DistillSetup<'_> {
        DistillSetup {
            teacher: &self.teacher,
            student: &self.config.student,
            generator: &self.config.generator,
            eval_set: &self.test,
            eval_suite: &self.config.eval,
        }
    }

    fn train_config(&self, mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs,
            seed,
            ..self.config.train.clone()
        }
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let config = ExperimentConfig::parse(DESK_CONFIG, "configs/desk.toml", &[]).unwrap();
        let (train, test) = config.datasets().unwrap();
        let train = train.expect("desk config renders a training split");
        let key = format!(
            "{}{}{}{}",
            toml::to_string(&config.data).unwrap(),
            config.teacher.descriptor(),
            toml::to_string(&config.teacher_training).unwrap(),
            toml::to_string(&config.eval).unwrap()
        );
        // the rendered pixels are part of the key so a change to the renderer invalidates the cache
        let mut digest = Sha256::new();
        digest.update(key.as_bytes());
        for v in train.images.data() {
            digest.update(v.to_le_bytes());
        }
        let hash = hex::encode(digest.finalize());
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-teacher-{}.ckpt", &hash[..16]));
        let cached = load_checkpoint(&path).ok().and_then(|ckpt| {
            let teacher = classifier_from_checkpoint(&ckpt, &config.teacher).ok()?;
            let report: TeacherReport = serde_json::from_value(ckpt.meta.extra.clone()).ok()?;
            Some((teacher, report))
        });
        let teacher_cached = cached.is_some();
        let (mut teacher, teacher_report) = match cached {
            Some(c) => c,
            None => {
                let (teacher, report) =
                    pretrain_robust_teacher(&train, &test, &config.teacher, &config.teacher_training, &config.eval)
                        .unwrap();
                let meta = CheckpointMeta {
                    seed: config.seed,
                    epoch: config.teacher_training.epochs,
                    config_hash: hash.clone(),
                    extra: serde_json::to_value(&report).unwrap(),
                };
                save_checkpoint(&classifier_checkpoint(&teacher, meta), &path).unwrap();
                (teacher, report)
            }
        };
        teacher.freeze();
        Desk {
            config,
            test,
            teacher,
            teacher_report,
            teacher_cached,
        }
    })
}

fn epoch_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Best-checkpoint robustness report of adaptive and vanilla runs, by seed.
fn ablation_runs() -> &'static Vec<(u64, f64, f64)> {
    static RUNS: OnceLock<Vec<(u64, f64, f64)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let d = desk();
        SEEDS
            .iter()
            .map(|&seed| {
                let mut avg = [0.0; 2];
                for (slot, mode) in avg.iter_mut().zip([TrainMode::Adaptive, TrainMode::Vanilla]) {
                    let cfg = d.train_config(mode, COMPARISON_EPOCHS, seed);
                    let (state, _) = distill(&cfg, d.setup()).unwrap();
                    let best = state.best.as_ref().map_or(&state.student, |(_, m)| m);
                    *slot = evaluate_robustness(best, "student", &d.test, &d.config.eval, seed).unwrap().average;
                }
                (seed, avg[0], avg[1])
            })
            .collect()
    })
}

fn criterion_6() -> Outcome {
    let d = desk();
    let t = &d.teacher_report;
    let teacher_ok = t.clean_accuracy >= 70.0 && t.pgd20_accuracy >= 40.0;
    let cfg = d.train_config(TrainMode::Adaptive, E2E_EPOCHS, d.config.seed);
    let before = d.teacher.clone();
    let started = Instant::now();
    let (state, run) = distill(&cfg, d.setup()).unwrap();
    let elapsed = started.elapsed();
    let best = state.best.as_ref().map_or(&state.student, |(_, m)| m);
    let r = evaluate_robustness(best, "student", &d.test, &d.config.eval, d.config.seed).unwrap();
    let chance = 100.0 / d.config.student.num_classes as f64;
    let student_ok = r.pgd_s >= 2.0 * chance;
    let taus = state.history.epoch_means(|r| Some(r.tau_tilde));
    let k = 10.min(taus.len());
    let (first, last) = (epoch_mean(&taus[..k]), epoch_mean(&taus[taus.len() - k..]));
    outcome(
        teacher_ok && student_ok && d.teacher == before,
        format!(
            "teacher{} clean {:.1}% / PGD-20 {:.1}% (need 70/40); student (T={}, best epoch {:?}, {:.0}s) clean {:.1}% fgsm {:.1}% PGD-20 {:.1}% PGD_T {:.1}% CW {:.1}% (need PGD-20 >= {:.0}%); tau epoch mean first10 {first:.3} last10 {last:.3}; teacher unchanged: {}",
            if d.teacher_cached { " (cached)" } else { "" },
            t.clean_accuracy,
            t.pgd20_accuracy,
            E2E_EPOCHS,
            run.best_epoch,
            elapsed.as_secs_f64(),
            r.clean,
            r.fgsm,
            r.pgd_s,
            r.pgd_t,
            r.cw,
            2.0 * chance,
            d.teacher == before
        ),
    )
}

fn criterion_7() -> Outcome {
    let runs = ablation_runs();
    let adaptive = epoch_mean(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
    let vanilla = epoch_mean(&runs.iter().map(|r| r.2).collect::<Vec<_>>());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|(s, a, v)| format!("seed {s}: {a:.2} vs {v:.2}"))
        .collect();
    outcome(
        adaptive >= vanilla,
        format!(
            "mean robust accuracy (4-attack average, T={COMPARISON_EPOCHS}) adaptive {adaptive:.2}% vs vanilla {vanilla:.2}%, gap {:+.2} [{}]",
            adaptive - vanilla,
            per_seed.join("; ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let d = desk();
    let base = d.train_config(TrainMode::Vanilla, COMPARISON_EPOCHS, 0);
    let report = temperature_strategy_experiment(&base, d.setup(), &SEEDS).unwrap();
    let mut decrease_wins = 0;
    let mut ita_wins = 0;
    let mut rows = Vec::new();
    for &seed in &SEEDS {
        let get = |s| report.best(s, seed).unwrap();
        let (dec, inc, con, ita) = (
            get(TempStrategy::StepDecrease),
            get(TempStrategy::StepIncrease),
            get(TempStrategy::Constant),
            get(TempStrategy::Interactive),
        );
        decrease_wins += (dec > inc) as usize;
        ita_wins += (ita >= con) as usize;
        rows.push(format!("seed {seed}: dec {dec:.1} inc {inc:.1} const {con:.1} ita {ita:.1}"));
    }
    outcome(
        decrease_wins >= 2 && ita_wins >= 2,
        format!(
            "best PGD_T (T={COMPARISON_EPOCHS}): step-decrease beats step-increase in {decrease_wins}/3, ITA >= constant in {ita_wins}/3 [{}]",
            rows.join("; ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let d = desk();
    let cfg = TrainConfig {
        gen_iters: 1,
        student_iters: 1,
        ..d.train_config(TrainMode::Adaptive, 10, 0)
    };
    let mut state = TrainState::new(&cfg, d.config.student.clone(), d.config.generator.clone()).unwrap();
    // warm-up iteration, then time three combined iterations
    generation_stage(&mut state, &d.teacher, &cfg).unwrap();
    distillation_stage(&mut state, &d.teacher, &cfg).unwrap();
    let reps = 3;
    let started = Instant::now();
    for _ in 0..reps {
        generation_stage(&mut state, &d.teacher, &cfg).unwrap();
        distillation_stage(&mut state, &d.teacher, &cfg).unwrap();
    }
    let iteration = started.elapsed() / reps;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let classes = d.config.student.num_classes;
    let shape = [cfg.batch_size, classes];
    let t = Tensor::<f32>::from_fn(&shape, |_| rng.gen_range(-5.0..5.0));
    let s = Tensor::<f32>::from_fn(&shape, |_| rng.gen_range(-5.0..5.0));
    let n = 1000;
    let started = Instant::now();
    let mut sink = 0.0;
    for _ in 0..n {
        let stats = confidence_stats(std::hint::black_box(&t), std::hint::black_box(&s)).unwrap();
        sink += interactive_temperature(&stats, classes).unwrap() + adaptive_lambda(&stats, classes).unwrap();
    }
    std::hint::black_box(sink);
    // two rule evaluations per combined iteration (one per stage)
    let rules: Duration = started.elapsed() * 2 / n;
    let ratio = rules.as_secs_f64() / iteration.as_secs_f64();
    outcome(
        ratio < 1e-3,
        format!(
            "rules incl. confidence statistics {:.1} us per iteration vs combined iteration {:.1} ms: {:.4}% overhead (limit 0.1%)",
            rules.as_secs_f64() * 1e6,
            iteration.as_secs_f64() * 1e3,
            100.0 * ratio
        ),
    )
}

fn criterion_10() -> Outcome {
    // small variant of the desk pipeline with a fresh teacher: the contract is bitwise equality
    let mut config = ExperimentConfig::parse(
        DESK_CONFIG,
        "configs/desk.toml",
        &[
            "data.synthetic.image_size=16".into(),
            "teacher.image_size=16".into(),
            "teacher.width=4".into(),
            "student.image_size=16".into(),
            "student.width=4".into(),
            "generator.base_size=4".into(),
            "generator.latent_dim=16".into(),
            "generator.channels=[8, 8, 8]".into(),
            "train.batch_size=16".into(),
            "train.student_iters=2".into(),
            "train.epochs=4".into(),
            "train.eval_every=1".into(),
            "train.attack={ epsilon = 0.03, step_size = 0.01, steps = 3, random_start = 0.001, loss = \"kd_vs_teacher\" }".into(),
            "eval.steps=3".into(),
            "data.synthetic.test_per_class=3".into(),
        ],
    )
    .unwrap();
    config.set_seed(10);
    let (_, test) = config.datasets().unwrap();
    let mut teacher = Classifier::<f32>::new(config.teacher.clone(), 77).unwrap();
    teacher.freeze();
    let cfg = &config.train;
    let eval = Some((&test, &config.eval));
    let dir = tempfile::tempdir().unwrap();

    let full = |name: &str| {
        let mut state = TrainState::new(cfg, config.student.clone(), config.generator.clone()).unwrap();
        run_dfard(cfg, &teacher, &mut state, eval, cfg.epochs).unwrap();
        let path = dir.path().join(name);
        write_metrics_csv(&path, &state.history.records).unwrap();
        (state, std::fs::read(path).unwrap())
    };
    let (a, csv_a) = full("a.csv");
    let (_, csv_b) = full("b.csv");

    let mut split = TrainState::new(cfg, config.student.clone(), config.generator.clone()).unwrap();
    run_dfard(cfg, &teacher, &mut split, eval, 2).unwrap();
    let bytes = encode(&split.to_checkpoint(config.seed, &config.hash()).unwrap()).unwrap();
    drop(split);
    let mut resumed =
        TrainState::from_checkpoint(&decode(&bytes).unwrap(), cfg, config.student.clone(), config.generator.clone())
            .unwrap();
    run_dfard(cfg, &teacher, &mut resumed, eval, cfg.epochs).unwrap();

    let same_csv = csv_a == csv_b;
    let same_history = resumed.history == a.history;
    let same_state = resumed == a;
    outcome(
        same_csv && same_history && same_state,
        format!(
            "identical-seed metrics.csv equal: {same_csv} ({} bytes); split at epoch 2 and resumed: histories equal {same_history}, full state equal {same_state}",
            csv_a.len()
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var_os("DFARD_STRICT_ACCEPTANCE").is_some();
    // (id, name, empirical, check)
    let criteria: [(usize, &str, bool, fn() -> Outcome); 10] = [
        (1, "interactive temperature exactness", false, criterion_1),
        (2, "adaptive balance exactness and bound", false, criterion_2),
        (3, "gradient oracle", false, criterion_3),
        (4, "attack contracts", false, criterion_4),
        (5, "entropy oracle", false, criterion_5),
        (6, "end-to-end desk run", true, criterion_6),
        (7, "ablation direction", true, criterion_7),
        (8, "temperature schedules", true, criterion_8),
        (9, "adaptive-rule overhead", false, criterion_9),
        (10, "determinism and resume", false, criterion_10),
    ];
    let (mut failed, mut empirical_failed) = (0, 0);
    for (id, name, empirical, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            if empirical && !strict {
                empirical_failed += 1;
            } else {
                failed += 1;
            }
        }
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if empirical_failed > 0 {
        println!("{empirical_failed} empirical desk-scale criteria failed (reported, not fatal)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
