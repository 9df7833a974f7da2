use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfard::metrics::read_table;

const CONFIG: &str = r#"
seed = 3
out_dir = "unused"

[data.synthetic]
num_classes = 4
train_per_class = 6
test_per_class = 3
image_size = 8

[teacher]
in_channels = 3
image_size = 8
width = 4
stages = 2
num_classes = 4

[teacher_training]
epochs = 1
batch_size = 8

[teacher_training.attack]
epsilon = 0.03
step_size = 0.01
steps = 1
random_start = 0.0
loss = "cross_entropy"

[student]
in_channels = 3
image_size = 8
width = 2
stages = 2
num_classes = 4

[generator]
latent_dim = 8
num_classes = 4
base_size = 2
channels = [8, 4, 4]

[train]
epochs = 2
student_iters = 2
batch_size = 6
eval_every = 1

[train.attack]
epsilon = 0.03
step_size = 0.01
steps = 2
random_start = 0.001
loss = "kd_vs_teacher"

[eval]
steps = 2
batch_size = 6
"#;

fn dfard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfard")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    /// Writes the config and trains the tiny teacher it points at.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let teacher = root.join("teacher");
        let text = format!("teacher_checkpoint = {:?}\n{CONFIG}", teacher.join("teacher.ckpt"));
        let config = root.join("config.toml");
        fs::write(&config, text).unwrap();
        let config = config.to_str().unwrap().to_string();
        ok(&dfard(&["pretrain-teacher", "--config", &config, "--out", teacher.to_str().unwrap()]));
        Self { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn distill_vanilla_then_evaluate_and_plot() {
    let ws = Workspace::new();
    let teacher_report = json(&ws.root.join("teacher/report.json"));
    assert_eq!(teacher_report["seed"], 3);
    assert!(teacher_report["config_hash"].as_str().unwrap().len() == 64);

    let run = ws.out("vanilla");
    ok(&dfard(&["distill", "--config", &ws.config, "--mode", "vanilla", "--out", &run]));
    let run = PathBuf::from(run);
    for f in ["config.toml", "config_hash.txt", "seed.txt", "metrics.csv", "best.ckpt", "final.ckpt", "report.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());
    let text = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(text.starts_with(
        "epoch,batch,tau_tilde,lambda,loss_cls,loss_adv,loss_gen,loss_kd,teacher_entropy,student_lr\n"
    ));
    let table = read_table(&run.join("metrics.csv")).unwrap();
    assert_eq!(table.rows.len(), 2 * 3);
    assert!(table.column("tau_tilde").unwrap().iter().all(|v| *v == Some(3.0)));
    assert!(table.column("lambda").unwrap().iter().all(|v| *v == Some(0.3)));

    let report = json(&run.join("report.json"));
    let evals = report["run"]["evals"].as_array().unwrap();
    let best = evals
        .iter()
        .max_by(|a, b| a["pgd_t"].as_f64().partial_cmp(&b["pgd_t"].as_f64()).unwrap())
        .unwrap();
    let first_best = evals.iter().find(|e| e["pgd_t"] == best["pgd_t"]).unwrap();
    assert_eq!(report["run"]["best_epoch"], first_best["epoch"]);

    let eval_dir = ws.out("eval");
    let best_ckpt = run.join("best.ckpt");
    ok(&dfard(&[
        "evaluate",
        "--config",
        &ws.config,
        "--checkpoint",
        best_ckpt.to_str().unwrap(),
        "--set",
        "eval.epsilon=0.0",
        "--out",
        &eval_dir,
    ]));
    let e = json(&Path::new(&eval_dir).join("evaluation.json"));
    for k in ["fgsm", "pgd_s", "pgd_t", "cw"] {
        assert_eq!(e[k], e["clean"], "{k}");
    }

    let three = ws.root.join("three.csv");
    let lines: Vec<&str> = text.lines().take(4).collect();
    fs::write(&three, lines.join("\n") + "\n").unwrap();
    let svg = ws.root.join("tau.svg");
    ok(&dfard(&["plot", three.to_str().unwrap(), "--kind", "tau", "--out", svg.to_str().unwrap()]));
    let svg = fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches(r#"class="point""#).count(), 3);
}

#[test]
fn identical_runs_and_resume_agree() {
    let ws = Workspace::new();
    let (a, b) = (ws.out("a"), ws.out("b"));
    ok(&dfard(&["distill", "--config", &ws.config, "--out", &a]));
    ok(&dfard(&["distill", "--config", &ws.config, "--out", &b]));
    let read = |d: &str| fs::read(Path::new(d).join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    ok(&dfard(&["distill", "--config", &ws.config, "--out", &a, "--resume"]));
    assert_eq!(read(&a), read(&b));

    let c = ws.out("c");
    ok(&dfard(&["distill", "--config", &ws.config, "--out", &c, "--seed", "9"]));
    assert_ne!(read(&a), read(&c));
    assert_eq!(fs::read_to_string(Path::new(&c).join("seed.txt")).unwrap(), "9\n");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, CONFIG).unwrap();
    let config = config.to_str().unwrap();
    let out_dir = dir.path().join("o");
    let out = out_dir.to_str().unwrap();

    let r = dfard(&["make-dataset", "--config", config, "--set", "train.bogus=1", "--out", out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus"));

    let r = dfard(&["distill", "--config", config, "--mode", "nonsense"]);
    assert_eq!(r.status.code(), Some(1));

    // no teacher checkpoint configured
    let r = dfard(&["distill", "--config", config, "--out", out]);
    assert_eq!(r.status.code(), Some(1));

    ok(&dfard(&["make-dataset", "--config", config, "--out", out]));
    assert!(out_dir.join("train.bin").exists() && out_dir.join("test.bin").exists());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, CONFIG).unwrap();
    let out = dir.path().join("o");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let r = dfard(&["make-dataset", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("locked"));
}
