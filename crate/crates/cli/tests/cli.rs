use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tsdistill::config::{prepare_data, RunConfig};
use tsdistill::rng::{derive_seed, stream};
use tsdistill::synthetic::{init_synthetic, SyntheticDataset};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tsdistill"));
    cmd.env_remove("DDTIME_LOG_LEVEL");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a two-variable series and a small config into `dir`.
fn workspace(dir: &Path) -> PathBuf {
    let mut csv = String::from("a,b\n");
    for t in 0..220 {
        let t = t as f64;
        csv.push_str(&format!("{},{}\n", (0.4 * t).sin(), (0.13 * t).cos() + 0.01 * t));
    }
    std::fs::write(dir.join("series.csv"), csv).unwrap();
    let cfg = format!(
        "data.path={}\nwindow.t_in=8\nwindow.t_out=4\nwindow.stride=4\n\
         teachers.trajectories=10\nteachers.epochs=3\nteachers.batch_size=8\nteachers.lr=0.01\n\
         distill.samples=2\ndistill.unroll_steps=3\ndistill.student_lr=0.01\ndistill.iterations=10\n\
         distill.eval_every=4\neval.seeds=0,1\neval.steps=20\neval.lr=0.01\n",
        dir.join("series.csv").display()
    );
    let path = dir.join("run.config");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn out_arg(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn teachers_write_grouped_buffers_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = out_arg(dir.path(), "a");
    let b = out_arg(dir.path(), "b");
    assert!(run(&["teachers", "--config", cfg, "--out", &a, "--seed", "3"]).status.success());
    assert!(run(&["--threads", "3", "teachers", "--config", cfg, "--out", &b, "--seed", "3"]).status.success());

    let mut files: Vec<String> = std::fs::read_dir(Path::new(&a).join("buffers"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ddtb"))
        .collect();
    files.sort();
    assert_eq!(files, vec!["replay_buffer_0.ddtb", "replay_buffer_1.ddtb"]);
    for f in &files {
        let x = std::fs::read(Path::new(&a).join("buffers").join(f)).unwrap();
        let y = std::fs::read(Path::new(&b).join("buffers").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    let metrics = std::fs::read_to_string(Path::new(&a).join("teachers/teacher_9_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn distill_then_eval_and_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = out_arg(dir.path(), "run");
    assert!(run(&["teachers", "--config", cfg, "--out", &out]).status.success());

    let o = run(&["distill", "--config", cfg, "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(Path::new(&out).join("run_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let evaluated: Vec<usize> = rows
        .iter()
        .filter(|r| !r.ends_with(",,"))
        .map(|r| r.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(evaluated, vec![4, 8]);

    let o = run(&["eval", "--config", cfg, "--out", &out, "--set", "eval.seeds=1,2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(Path::new(&out).join("eval_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("MSE"));

    let syn = Path::new(&out).join("synthetic.ddts");
    let o = run(&["diversity", syn.to_str().unwrap(), "--out", &out]);
    assert!(o.status.success());
    let value: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!(value >= 0.0);
}

#[test]
fn zero_iterations_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = out_arg(dir.path(), "run");
    assert!(run(&["teachers", "--config", cfg, "--out", &out]).status.success());
    let o = run(&["distill", "--config", cfg, "--out", &out, "--seed", "5", "--set", "distill.iterations=0"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let written = SyntheticDataset::load(Path::new(&out).join("synthetic.ddts")).unwrap();
    let rc = RunConfig::load(&cfg_path).unwrap();
    let data = prepare_data(&rc).unwrap();
    let expected = init_synthetic(&data.train, 2, derive_seed(5, stream::SYNTHETIC_INIT)).unwrap();
    assert_eq!(written, expected);
    let log = std::fs::read_to_string(Path::new(&out).join("run_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn duplicated_samples_have_zero_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let sample = [0.3, -1.0, 2.0, 0.5, 0.1, 0.9];
    let data: Vec<f64> = sample.iter().chain(&sample).chain(&sample).copied().collect();
    let path = dir.path().join("dup.ddts");
    SyntheticDataset::new(3, 2, 2, 1, data).unwrap().save(&path).unwrap();
    let o = run(&["diversity", path.to_str().unwrap(), "--out", &out_arg(dir.path(), "o"), "--tau", "0.5"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "0");
}

#[test]
fn corrupted_synthetic_file_fails_with_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ddts");
    SyntheticDataset::new(2, 1, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[30] ^= 0x10;
    std::fs::write(&path, bytes).unwrap();
    let out = out_arg(dir.path(), "o");
    let o = run(&["diversity", path.to_str().unwrap(), "--out", &out]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
    assert!(!Path::new(&out).exists());
}

#[test]
fn failures_exit_nonzero_without_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let cfg = cfg_path.to_str().unwrap();

    // output below a regular file cannot be created
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "x").unwrap();
    let o = run(&["teachers", "--config", cfg, "--out", blocker.join("out").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));

    let out = out_arg(dir.path(), "empty");
    let o = run(&["distill", "--config", cfg, "--out", &out]);
    assert!(!o.status.success());
    assert!(!Path::new(&out).exists());

    let o = run(&["teachers", "--config", cfg, "--out", &out, "--set", "data.path=/nonexistent.csv"]);
    assert!(!o.status.success());
    assert!(!Path::new(&out).exists());

    let o = run(&["teachers", "--config", cfg, "--set", "distill.alpha=2"]);
    assert!(!o.status.success());
    let o = run(&["teachers", "--config", dir.path().join("missing.config").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn eval_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let path = dir.path().join("s.ddts");
    SyntheticDataset::new(2, 2, 3, 4, vec![0.5; 28]).unwrap().save(&path).unwrap();
    let o = run(&["eval", path.to_str().unwrap(), "--config", cfg_path.to_str().unwrap(), "--out", &out_arg(dir.path(), "o")]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config expects"));
}

#[test]
fn log_level_is_read_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let out = out_arg(dir.path(), "run");
    let o = bin()
        .env("DDTIME_LOG_LEVEL", "info")
        .args(["teachers", "--config", cfg_path.to_str().unwrap(), "--out", &out])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("training 10 teachers"));
    let quiet = bin()
        .env("DDTIME_LOG_LEVEL", "error")
        .args(["teachers", "--config", cfg_path.to_str().unwrap(), "--out", &out])
        .output()
        .unwrap();
    assert!(stderr(&quiet).is_empty());
}
