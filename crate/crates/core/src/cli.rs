//! Command-line front end.
//!
//! Every subcommand writes into one output directory: a copy of the
//! resolved configuration, its hash, the seed, and the subcommand's
//! artifacts. The directory is locked for the lifetime of the command.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data_io::checkpoint::{
    classifier_checkpoint, classifier_from_checkpoint, generator_checkpoint, generator_from_checkpoint,
    CheckpointMeta,
};
use crate::data_io::{load_checkpoint, save_checkpoint, save_raw, Checkpoint};
use crate::error::{Error, Result};
use crate::evaluation::{
    entropy_report, evaluate_robustness, temperature_strategy_experiment, DistillSetup, TempStrategy,
};
use crate::metrics::{read_table, write_evals_csv, write_metrics_csv};
use crate::models::Classifier;
use crate::plot::{kind_columns, render_svg};
use crate::trainer::{pretrain_robust_teacher, run_dfard_with, TrainMode, TrainState};

#[derive(Debug, Parser)]
#[command(name = "dfard", version, about = "Data-free adversarial robustness distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the experiment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to raw-binary files.
    MakeDataset(Common),
    /// Adversarially train the teacher.
    PretrainTeacher(Common),
    /// Distill a robust student without real data.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Robustness report for a classifier checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Teacher entropy on generated batches.
    EntropyReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: PathBuf,
        /// Teacher checkpoint; defaults to `teacher_checkpoint` from the config.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare fixed temperature schedules with the interactive temperature.
    TempExperiment(Common),
    /// Draw columns of a metrics CSV as an SVG line plot.
    Plot {
        metrics: PathBuf,
        /// tau, lambda, loss, entropy, lr or accuracy.
        #[arg(long)]
        kind: String,
        /// Output file; defaults to `<kind>.svg` beside the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Adaptive,
    Vanilla,
    ItaGenOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adaptive => TrainMode::Adaptive,
            ModeArg::Vanilla => TrainMode::Vanilla,
            ModeArg::ItaGenOnly => TrainMode::ItaGenOnly,
        }
    }
}

/// Exit status for an error: 1 configuration, 3 numerical, 2 anything else.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical { .. } => 3,
        _ => 2,
    }
}

/// Held while a command writes into its output directory.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::input(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct Run {
    config: ExperimentConfig,
    hash: String,
    dir: PathBuf,
    _lock: DirLock,
}

impl Run {
    fn open(common: &Common, mode: Option<ModeArg>) -> Result<Self> {
        let mut overrides = common.overrides.clone();
        if let Some(m) = mode {
            let name = match m {
                ModeArg::Adaptive => "adaptive",
                ModeArg::Vanilla => "vanilla",
                ModeArg::ItaGenOnly => "ita-gen-only",
            };
            overrides.push(format!("train.mode=\"{name}\""));
        }
        let mut config = ExperimentConfig::load(&common.config, &overrides)?;
        if let Some(seed) = common.seed {
            config.set_seed(seed);
        }
        if let Some(out) = &common.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        let dir = config.out_dir.clone();
        let lock = DirLock::acquire(&dir)?;
        let hash = config.hash();
        write(&dir.join("config.toml"), &config.to_toml())?;
        write(&dir.join("config_hash.txt"), &format!("{hash}\n"))?;
        write(&dir.join("seed.txt"), &format!("{}\n", config.seed))?;
        Ok(Self {
            config,
            hash,
            dir,
            _lock: lock,
        })
    }

    fn meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.config.seed,
            epoch,
            config_hash: self.hash.clone(),
            extra: serde_json::Value::Null,
        }
    }

    fn write_json<T: Serialize>(&self, name: &str, payload: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            seed: u64,
            config_hash: &'a str,
            threads: usize,
            #[serde(flatten)]
            payload: &'a T,
        }
        let text = serde_json::to_string_pretty(&Envelope {
            seed: self.config.seed,
            config_hash: &self.hash,
            threads: 1,
            payload,
        })
        .map_err(|e| Error::input(e.to_string()))?;
        write(&self.dir.join(name), &(text + "\n"))
    }

    fn teacher(&self, path: Option<&Path>) -> Result<Classifier<f32>> {
        let path = path
            .or(self.config.teacher_checkpoint.as_deref())
            .ok_or_else(|| Error::config("no teacher checkpoint given (set teacher_checkpoint)"))?;
        let mut teacher = classifier_from_checkpoint(&load_checkpoint(path)?, &self.config.teacher)?;
        teacher.freeze();
        Ok(teacher)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset(common) => make_dataset(&Run::open(&common, None)?),
        Command::PretrainTeacher(common) => pretrain(&Run::open(&common, None)?),
        Command::Distill { common, mode, resume } => distill(&Run::open(&common, mode)?, resume),
        Command::Evaluate { common, checkpoint } => evaluate(&Run::open(&common, None)?, &checkpoint),
        Command::EntropyReport {
            common,
            generator,
            teacher,
        } => entropy(&Run::open(&common, None)?, &generator, teacher.as_deref()),
        Command::TempExperiment(common) => temp_experiment(&Run::open(&common, None)?),
        Command::Plot { metrics, kind, out } => plot(&metrics, &kind, out),
    }
}

fn make_dataset(run: &Run) -> Result<()> {
    let (train, test) = run.config.datasets()?;
    if let Some(train) = train {
        save_raw(&train, &run.dir.join("train.bin"))?;
    }
    save_raw(&test, &run.dir.join("test.bin"))?;
    println!("wrote datasets to {}", run.dir.display());
    Ok(())
}

fn pretrain(run: &Run) -> Result<()> {
    let (train, test) = run.config.datasets()?;
    let train = train.ok_or_else(|| Error::config("pretrain-teacher needs a training split (data.train)"))?;
    let (teacher, report) = pretrain_robust_teacher(
        &train,
        &test,
        &run.config.teacher,
        &run.config.teacher_training,
        &run.config.eval,
    )?;
    let epochs = run.config.teacher_training.epochs;
    save_checkpoint(&classifier_checkpoint(&teacher, run.meta(epochs)), &run.dir.join("teacher.ckpt"))?;
    run.write_json("report.json", &report)?;
    println!(
        "teacher: clean {:.2}%  pgd20 {:.2}%",
        report.clean_accuracy, report.pgd20_accuracy
    );
    Ok(())
}

fn distill(run: &Run, resume: bool) -> Result<()> {
    let cfg = &run.config;
    let teacher = run.teacher(None)?;
    let (_, test) = cfg.datasets()?;
    let state_path = run.dir.join("state.ckpt");
    let mut state = if resume {
        let ckpt = load_checkpoint(&state_path)?;
        if ckpt.meta.config_hash != run.hash {
            return Err(Error::config(format!(
                "cannot resume: saved state has config hash {}, current config is {}",
                ckpt.meta.config_hash, run.hash
            )));
        }
        TrainState::from_checkpoint(&ckpt, &cfg.train, cfg.student.clone(), cfg.generator.clone())?
    } else {
        TrainState::new(&cfg.train, cfg.student.clone(), cfg.generator.clone())?
    };
    let outcome = run_dfard_with(&cfg.train, &teacher, &mut state, Some((&test, &cfg.eval)), cfg.train.epochs, |s| {
        save_checkpoint(&s.to_checkpoint(cfg.seed, &run.hash)?, &state_path)?;
        write_metrics_csv(&run.dir.join("metrics.csv"), &s.history.records)
    });
    let report = match outcome {
        Ok(r) => r,
        Err(e) => {
            let dump = run.dir.join("abort_state.ckpt");
            if state.to_checkpoint(cfg.seed, &run.hash).and_then(|c| save_checkpoint(&c, &dump)).is_ok() {
                eprintln!("state at failure written to {}", dump.display());
            }
            return Err(e);
        }
    };
    write_metrics_csv(&run.dir.join("metrics.csv"), &state.history.records)?;
    write_evals_csv(&run.dir.join("evals.csv"), &state.history.evals)?;
    let best = state.best.as_ref().map_or(&state.student, |(_, m)| m);
    let best_epoch = report.best_epoch.unwrap_or(state.epoch);
    save_checkpoint(&classifier_checkpoint(best, run.meta(best_epoch)), &run.dir.join("best.ckpt"))?;
    save_checkpoint(&classifier_checkpoint(&state.student, run.meta(state.epoch)), &run.dir.join("final.ckpt"))?;
    save_checkpoint(
        &generator_checkpoint(&state.generator, run.meta(state.epoch)),
        &run.dir.join("generator.ckpt"),
    )?;
    let robustness = evaluate_robustness(best, "student", &test, &cfg.eval, cfg.seed)?;
    #[derive(Serialize)]
    struct Report<'a> {
        mode: TrainMode,
        run: &'a crate::trainer::RunReport,
        best_student: &'a crate::evaluation::RobustnessReport,
    }
    run.write_json(
        "report.json",
        &Report {
            mode: cfg.train.mode,
            run: &report,
            best_student: &robustness,
        },
    )?;
    println!("{robustness}");
    Ok(())
}

/// Rebuilds whichever configured classifier the checkpoint describes.
fn classifier_for(run: &Run, ckpt: &Checkpoint) -> Result<(Classifier<f32>, &'static str)> {
    if ckpt.descriptor == run.config.student.descriptor() {
        return Ok((classifier_from_checkpoint(ckpt, &run.config.student)?, "student"));
    }
    Ok((classifier_from_checkpoint(ckpt, &run.config.teacher)?, "teacher"))
}

fn evaluate(run: &Run, checkpoint: &Path) -> Result<()> {
    let (model, role) = classifier_for(run, &load_checkpoint(checkpoint)?)?;
    let (_, test) = run.config.datasets()?;
    let report = evaluate_robustness(&model, role, &test, &run.config.eval, run.config.seed)?;
    run.write_json("evaluation.json", &report)?;
    println!("{report}");
    Ok(())
}

fn entropy(run: &Run, generator: &Path, teacher: Option<&Path>) -> Result<()> {
    let teacher = run.teacher(teacher)?;
    let generator = generator_from_checkpoint(&load_checkpoint(generator)?, &run.config.generator)?;
    let trace = entropy_report(
        &teacher,
        &generator,
        run.config.experiment.entropy_batches,
        run.config.train.batch_size,
        run.config.seed,
    )?;
    let mut csv = String::from("batch,entropy\n");
    for (i, h) in trace.per_batch.iter().enumerate() {
        csv.push_str(&format!("{i},{h}\n"));
    }
    write(&run.dir.join("entropy.csv"), &csv)?;
    run.write_json("entropy.json", &trace)?;
    println!("mean teacher entropy {:.4}", trace.mean);
    Ok(())
}

fn temp_experiment(run: &Run) -> Result<()> {
    let cfg = &run.config;
    let teacher = run.teacher(None)?;
    let (_, test) = cfg.datasets()?;
    let report = temperature_strategy_experiment(
        &cfg.train,
        DistillSetup {
            teacher: &teacher,
            student: &cfg.student,
            generator: &cfg.generator,
            eval_set: &test,
            eval_suite: &cfg.eval,
        },
        &cfg.experiment.seeds,
    )?;
    run.write_json("temp_experiment.json", &report)?;
    print!("{:<8}", "seed");
    for s in TempStrategy::ALL {
        print!(" {:>14}", format!("{s:?}"));
    }
    println!();
    for seed in report.seeds() {
        print!("{seed:<8}");
        for s in TempStrategy::ALL {
            print!(" {:>14.2}", report.best(s, seed).unwrap_or(f64::NAN));
        }
        println!();
    }
    Ok(())
}

fn plot(metrics: &Path, kind: &str, out: Option<PathBuf>) -> Result<()> {
    let columns = kind_columns(kind)?;
    let table = read_table(metrics)?;
    let dir = metrics.parent().unwrap_or(Path::new("."));
    let footer = ["seed.txt", "config_hash.txt"]
        .iter()
        .filter_map(|f| fs::read_to_string(dir.join(f)).ok())
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let svg = render_svg(&table, columns, &format!("{kind} ({})", metrics.display()), &format!("seed/config: {footer}"))?;
    let out = out.unwrap_or_else(|| dir.join(format!("{kind}.svg")));
    write(&out, &svg)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Parses arguments, runs the command, and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
