use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn, LevelFilter};

use tsdistill::buffer::{buffer_file_name, load_buffers, metrics_csv, save_buffer, sidecar_path, train_teachers, ExpertBuffer};
use tsdistill::config::{prepare_data, RunConfig};
use tsdistill::distill::{run_distillation, run_log_csv, RealSplits};
use tsdistill::eval::{diversity, train_and_eval};
use tsdistill::synthetic::SyntheticDataset;

#[derive(Parser, Debug)]
#[command(name = "tsdistill", version, about = "Distill a forecasting dataset into a few learnable samples")]
struct Cli {
    /// Run configuration (`section.key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train expert trajectories and write replay buffers.
    Teachers,
    /// Distill a synthetic dataset from the replay buffers.
    Distill,
    /// Train students on a synthetic file and report test metrics.
    Eval {
        /// Defaults to `<out>/synthetic.ddts`.
        synthetic: Option<PathBuf>,
    },
    /// Mean pairwise symmetric KL of a synthetic file.
    Diversity {
        synthetic: PathBuf,
        /// Softmax temperature; defaults to `distill.tau`.
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn init_logging() {
    let level = match std::env::var("DDTIME_LOG_LEVEL").as_deref() {
        Ok("error") => LevelFilter::Error,
        Ok("warn") | Err(_) => LevelFilter::Warn,
        Ok("info") => LevelFilter::Info,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => {
            eprintln!("ignoring DDTIME_LOG_LEVEL={other:?}; expected error, warn, info or debug");
            LevelFilter::Warn
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files written by one command; removed again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.dirs.extend(missing);
        Ok(())
    }

    fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
        self.files.push(path.clone());
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in &self.dirs {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn cmd_teachers(cfg: &RunConfig, threads: usize) -> Result<()> {
    let data = prepare_data(cfg)?;
    let spec = cfg.model_spec(data.train.n_vars);
    info!("training {} teachers on {} windows", cfg.trajectories, data.train.len());
    let trajectories = train_teachers(&data.train, &data.test, &spec, &cfg.teacher, cfg.trajectories, cfg.seed, threads)?;

    let mut out = Outputs::default();
    let buffer_dir = cfg.resolved_buffer_dir();
    let metrics_dir = cfg.output_dir.join("teachers");
    out.dir(&buffer_dir)?;
    out.dir(&metrics_dir)?;
    for (i, group) in trajectories.chunks(cfg.group_size).enumerate() {
        let path = buffer_dir.join(buffer_file_name(i));
        out.track(path.clone());
        out.track(sidecar_path(&path));
        let buffer = ExpertBuffer {
            spec: spec.clone(),
            trajectories: group.to_vec(),
        };
        save_buffer(&buffer, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    for (i, t) in trajectories.iter().enumerate() {
        out.write(metrics_dir.join(format!("teacher_{i}_metrics.csv")), metrics_csv(t))?;
    }
    out.write(cfg.output_dir.join("teachers.config"), cfg.to_text())?;
    out.commit();
    println!(
        "wrote {} trajectories in {} buffer files to {}",
        trajectories.len(),
        trajectories.len().div_ceil(cfg.group_size),
        buffer_dir.display()
    );
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, threads: usize) -> Result<()> {
    let buffer_dir = cfg.resolved_buffer_dir();
    let buffer = load_buffers(&buffer_dir).with_context(|| format!("loading buffers from {}", buffer_dir.display()))?;
    let data = prepare_data(cfg)?;
    let expected = cfg.model_spec(data.train.n_vars);
    if buffer.spec != expected {
        bail!("buffers were trained for {:?}, config describes {:?}", buffer.spec, expected);
    }
    let result = run_distillation(
        &cfg.distill,
        &buffer,
        RealSplits {
            train: &data.train,
            val: &data.val,
        },
        cfg.seed,
        threads,
    )?;

    let mut out = Outputs::default();
    out.dir(&cfg.output_dir)?;
    out.write(cfg.output_dir.join("synthetic.ddts"), result.best.to_bytes())?;
    out.write(cfg.output_dir.join("synthetic_final.ddts"), result.final_synthetic.to_bytes())?;
    out.write(cfg.output_dir.join("run_log.csv"), run_log_csv(&result.log))?;
    out.write(cfg.output_dir.join("distill.config"), cfg.to_text())?;
    out.commit();
    match result.best_val_mse {
        Some(mse) => println!("best validation MSE {mse:.6} at iteration {}", result.best_iteration),
        None => println!("no iterations run; wrote the initialization"),
    }
    Ok(())
}

fn load_synthetic(path: &Path) -> Result<SyntheticDataset> {
    SyntheticDataset::load(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_eval(cfg: &RunConfig, synthetic: Option<PathBuf>, threads: usize) -> Result<()> {
    let path = synthetic.unwrap_or_else(|| cfg.output_dir.join("synthetic.ddts"));
    let syn = load_synthetic(&path)?;
    let data = prepare_data(cfg)?;
    if (syn.n_vars, syn.t_in, syn.t_out) != (data.test.n_vars, cfg.t_in, cfg.t_out) {
        bail!(
            "synthetic file has {} variables and windows {}→{}, config expects {} and {}→{}",
            syn.n_vars,
            syn.t_in,
            syn.t_out,
            data.test.n_vars,
            cfg.t_in,
            cfg.t_out
        );
    }
    let spec = cfg.model_spec(syn.n_vars);
    let mut report = train_and_eval(&syn, &data.test, &spec, &cfg.distill.eval_seeds, &cfg.distill.eval, data.train.len(), threads)?;
    if syn.samples >= 2 {
        report.diversity = Some(diversity(&syn, &cfg.distill.isib)?);
    }
    for seed in report.diverged_seeds() {
        warn!("student seed {seed} diverged and is excluded from the summary");
    }

    let mut out = Outputs::default();
    out.dir(&cfg.output_dir)?;
    out.write(cfg.output_dir.join("eval_report.csv"), report.to_csv())?;
    out.write(cfg.output_dir.join("eval_summary.txt"), report.summary())?;
    out.commit();
    print!("{}", report.summary());
    Ok(())
}

fn cmd_diversity(cfg: &RunConfig, synthetic: &Path, tau: Option<f64>) -> Result<()> {
    let syn = load_synthetic(synthetic)?;
    let mut isib = cfg.distill.isib;
    if let Some(tau) = tau {
        isib.tau = tau;
    }
    let value = diversity(&syn, &isib)?;
    let mut out = Outputs::default();
    out.dir(&cfg.output_dir)?;
    out.write(cfg.output_dir.join("diversity.txt"), format!("{value}\n"))?;
    out.commit();
    println!("{value}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Teachers => cmd_teachers(&cfg, threads),
        Command::Distill => cmd_distill(&cfg, threads),
        Command::Eval { synthetic } => cmd_eval(&cfg, synthetic, threads),
        Command::Diversity { synthetic, tau } => cmd_diversity(&cfg, &synthetic, tau),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
