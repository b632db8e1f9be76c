//! The outer loop: sample an expert segment, unroll a student on the
//! synthetic data, backpropagate the combined objective into the synthetic
//! tensor and take an Adam step on it.

use log::{debug, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{sample_moving_segment, ExpertBuffer};
use crate::data::{sample_window_indices, WindowedDataset};
use crate::error::{Error, Result};
use crate::eval::{train_and_eval, EvalTrainConfig};
use crate::losses::{IsibConfig, LossBreakdown};
use crate::metagrad::{MetaObjective, ValueInputs};
use crate::models::{param_sq_distance, predict_rows, Adam, ModelSpec};
use crate::rng::{derive_seed, seeded, stream};
use crate::synthetic::{init_synthetic, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueInputSource {
    Synthetic,
    Real,
}

/// Which checkpoint plays the teacher in the value term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTeacher {
    SegmentTarget,
    ExpertFinal,
}

/// Normalizer of the parameter term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamNormalization {
    /// `‖θ_target − θ_start‖²` of the sampled segment.
    Segment,
    /// `‖θ_final − θ_init‖²` of the whole sampled trajectory.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub samples: usize,
    pub alpha: f64,
    pub lambda_is: f64,
    pub isib: IsibConfig,
    pub synthetic_lr: f64,
    pub student_lr: f64,
    pub unroll_steps: usize,
    pub segment_span: usize,
    pub interval: usize,
    pub cond_coef: f64,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_seeds: Vec<u64>,
    pub eval: EvalTrainConfig,
    pub value_input_source: ValueInputSource,
    pub real_batch_size: usize,
    pub value_teacher: ValueTeacher,
    pub normalization: ParamNormalization,
    pub max_grad_norm: Option<f64>,
    pub max_segment_tries: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            samples: 3,
            alpha: 0.8,
            lambda_is: 0.6,
            isib: IsibConfig::default(),
            synthetic_lr: 0.1,
            student_lr: 3e-4,
            unroll_steps: 20,
            segment_span: 1,
            interval: 5,
            cond_coef: 0.01,
            iterations: 300,
            eval_every: 50,
            eval_seeds: vec![0, 1, 2, 3, 4],
            eval: EvalTrainConfig::default(),
            value_input_source: ValueInputSource::Synthetic,
            real_batch_size: 32,
            value_teacher: ValueTeacher::SegmentTarget,
            normalization: ParamNormalization::Segment,
            max_grad_norm: None,
            max_segment_tries: 16,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.samples == 0 {
            return bad("distill.samples must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("distill.alpha must lie in [0, 1]");
        }
        if !(self.lambda_is >= 0.0) {
            return bad("distill.lambda_is must be non-negative");
        }
        if !(self.synthetic_lr >= 0.0) || !(self.student_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.interval == 0 {
            return bad("distill.interval must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.cond_coef) {
            return bad("distill.cond_coef must lie in [0, 1]");
        }
        if self.segment_span == 0 || self.eval_every == 0 {
            return bad("distill.segment_span and distill.eval_every must be at least 1");
        }
        if self.real_batch_size == 0 {
            return bad("distill.real_batch_size must be at least 1");
        }
        self.isib.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// `Y ← (1−coef)·Y + coef·M_θ(X)` for every sample; inputs untouched.
pub fn conditional_update(
    synthetic: &SyntheticDataset,
    spec: &ModelSpec,
    theta_teacher: &[f64],
    coef: f64,
) -> Result<SyntheticDataset> {
    if !(0.0..=1.0).contains(&coef) {
        return Err(Error::InvalidArgument(format!("coefficient {coef} outside [0, 1]")));
    }
    let pred = predict_rows(spec, theta_teacher, &synthetic.inputs())?;
    let blended: Vec<f64> = synthetic
        .targets()
        .iter()
        .zip(&pred)
        .map(|(y, p)| (1.0 - coef) * y + coef * p)
        .collect();
    let mut out = synthetic.clone();
    out.set_targets(&blended);
    Ok(out)
}

/// Mutable state of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub synthetic: SyntheticDataset,
    pub adam: Adam,
    pub segment_rng: ChaCha8Rng,
    pub conditional_rng: ChaCha8Rng,
    pub real_rng: ChaCha8Rng,
}

impl DistillState {
    pub fn new(synthetic: SyntheticDataset, cfg: &DistillConfig, seed: u64) -> Self {
        let n = synthetic.data.len();
        Self {
            synthetic,
            adam: Adam::new(n, cfg.synthetic_lr),
            segment_rng: seeded(derive_seed(seed, stream::SEGMENTS)),
            conditional_rng: seeded(derive_seed(seed, stream::CONDITIONAL)),
            real_rng: seeded(derive_seed(seed, stream::REAL_BATCHES)),
        }
    }
}

/// One meta-gradient update of the synthetic tensor.
pub fn distill_step(
    state: &mut DistillState,
    cfg: &DistillConfig,
    buffer: &ExpertBuffer,
    real_train: &WindowedDataset,
) -> Result<LossBreakdown> {
    let spec = &buffer.spec;
    let seg = sample_moving_segment(&buffer.trajectories, cfg.segment_span, &mut state.segment_rng, cfg.max_segment_tries)?;
    let expert = &buffer.trajectories[seg.expert_index];
    let denominator = match cfg.normalization {
        ParamNormalization::Segment => param_sq_distance(&seg.theta_target, &seg.theta_start)?,
        ParamNormalization::Global => param_sq_distance(expert.final_checkpoint(), &expert.checkpoints[0])?,
    };
    let teacher = match cfg.value_teacher {
        ValueTeacher::SegmentTarget => seg.theta_target.as_slice(),
        ValueTeacher::ExpertFinal => expert.final_checkpoint(),
    };
    let value_inputs = match cfg.value_input_source {
        ValueInputSource::Synthetic => ValueInputs::Synthetic,
        ValueInputSource::Real => {
            let idx = sample_window_indices(real_train, cfg.real_batch_size, &mut state.real_rng)?;
            ValueInputs::Real(idx.iter().flat_map(|&i| real_train.pairs[i].input.iter().copied()).collect())
        }
    };
    let objective = MetaObjective {
        spec,
        theta_start: &seg.theta_start,
        theta_target: &seg.theta_target,
        teacher,
        denominator,
        value_inputs,
        alpha: cfg.alpha,
        lambda_is: cfg.lambda_is,
        isib: cfg.isib,
        unroll_steps: cfg.unroll_steps,
        student_lr: cfg.student_lr,
    };
    let (breakdown, mut grad) = objective.value_and_gradient(&state.synthetic)?;
    if let Some(max) = cfg.max_grad_norm {
        let norm = grad.norm();
        if norm > max {
            grad.scale(max / norm);
        }
    }
    let full = grad.to_full(&state.synthetic);
    state.adam.lr = cfg.synthetic_lr;
    state.adam.step(&mut state.synthetic.data, &full)?;
    if !state.synthetic.data.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence("synthetic data after update".into()));
    }
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub eval: Option<EvalPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub initial: SyntheticDataset,
    pub best: SyntheticDataset,
    pub best_iteration: usize,
    pub best_val_mse: Option<f64>,
    pub final_synthetic: SyntheticDataset,
    pub final_val_mse: Option<f64>,
    pub log: Vec<RunLogRow>,
    pub conditional_updates: usize,
}

pub const RUN_LOG_HEADER: &str = "iteration,l_param,l_val_tmp,l_val_fre,l_is,total,eval_mse,eval_mae";

pub fn run_log_csv(log: &[RunLogRow]) -> String {
    let mut out = String::from(RUN_LOG_HEADER);
    out.push('\n');
    for row in log {
        let l = &row.loss;
        let (m, a) = row
            .eval
            .map_or((String::new(), String::new()), |e| (e.mse.to_string(), e.mae.to_string()));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.iteration, l.l_param, l.l_val_tmp, l.l_val_fre, l.l_is, l.total, m, a
        ));
    }
    out
}

/// Real windows the run draws from.
#[derive(Debug, Clone, Copy)]
pub struct RealSplits<'a> {
    pub train: &'a WindowedDataset,
    pub val: &'a WindowedDataset,
}

/// Runs `cfg.iterations` distillation steps with periodic conditional
/// updates and validation. The returned best dataset is the evaluated
/// snapshot (every `eval_every` iterations and the final one) with the
/// lowest validation MSE.
pub fn run_distillation(
    cfg: &DistillConfig,
    buffer: &ExpertBuffer,
    real: RealSplits<'_>,
    seed: u64,
    threads: usize,
) -> Result<RunResult> {
    cfg.validate()?;
    let spec = &buffer.spec;
    if real.train.t_in != spec.t_in || real.train.t_out != spec.t_out || real.train.n_vars != spec.n_vars {
        return Err(Error::ShapeMismatch("real windows do not match the buffer's model".into()));
    }
    let initial = init_synthetic(real.train, cfg.samples, derive_seed(seed, stream::SYNTHETIC_INIT))?;
    let mut state = DistillState::new(initial.clone(), cfg, seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, SyntheticDataset)> = None;
    let mut final_val_mse = None;
    let mut conditional_updates = 0;

    let evaluate = |syn: &SyntheticDataset| -> Result<EvalPoint> {
        let report = train_and_eval(syn, real.val, spec, &cfg.eval_seeds, &cfg.eval, real.train.len(), threads)?;
        Ok(EvalPoint {
            mse: report.mse_mean,
            mae: report.mae_mean,
        })
    };

    for iteration in 1..=cfg.iterations {
        let loss = distill_step(&mut state, cfg, buffer, real.train)?;
        if iteration % cfg.interval == 0 && cfg.cond_coef > 0.0 {
            let k = state.conditional_rng.gen_range(0..buffer.trajectories.len());
            let teacher = buffer.trajectories[k].final_checkpoint();
            state.synthetic = conditional_update(&state.synthetic, spec, teacher, cfg.cond_coef)?;
            conditional_updates += 1;
        }
        let logged = iteration % cfg.eval_every == 0;
        let eval = if logged || iteration == cfg.iterations {
            let point = evaluate(&state.synthetic)?;
            if iteration == cfg.iterations {
                final_val_mse = Some(point.mse);
            }
            if point.mse.is_finite() && best.as_ref().is_none_or(|(b, _, _)| point.mse < *b) {
                best = Some((point.mse, iteration, state.synthetic.clone()));
            }
            info!("iteration {iteration}: total {:.6}, val mse {:.6}", loss.total, point.mse);
            logged.then_some(point)
        } else {
            None
        };
        debug!(
            "iteration {iteration}: param {:.6} tmp {:.6} fre {:.6} is {:.6}",
            loss.l_param, loss.l_val_tmp, loss.l_val_fre, loss.l_is
        );
        log.push(RunLogRow { iteration, loss, eval });
    }

    let final_synthetic = state.synthetic;
    let (best_val_mse, best_iteration, best) = match best {
        Some((mse, it, syn)) => (Some(mse), it, syn),
        None if cfg.iterations == 0 => (None, 0, initial.clone()),
        None => (None, cfg.iterations, final_synthetic.clone()),
    };
    Ok(RunResult {
        initial,
        best,
        best_iteration,
        best_val_mse,
        final_synthetic,
        final_val_mse,
        log,
        conditional_updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{train_teacher, TeacherConfig};
    use crate::data::{slide_windows, RawSeries};

    fn setup() -> (ExpertBuffer, WindowedDataset, WindowedDataset) {
        let a: Vec<f64> = (0..160).map(|t| (0.3 * t as f64).sin()).collect();
        let b: Vec<f64> = (0..160).map(|t| (0.11 * t as f64).cos()).collect();
        let series = RawSeries::from_variables(vec![a, b]).unwrap();
        let train = slide_windows(&series.slice_time(0, 120), 6, 4, 2).unwrap();
        let val = slide_windows(&series.slice_time(110, 160), 6, 4, 2).unwrap();
        let spec = ModelSpec::channel_linear(6, 4, 2);
        let tcfg = TeacherConfig {
            epochs: 4,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
        };
        let trajectories = (0..2).map(|s| train_teacher(&train, &val, &spec, &tcfg, s).unwrap()).collect();
        (ExpertBuffer { spec, trajectories }, train, val)
    }

    fn small_cfg() -> DistillConfig {
        DistillConfig {
            samples: 2,
            unroll_steps: 3,
            student_lr: 0.01,
            iterations: 10,
            eval_every: 5,
            eval_seeds: vec![0, 1],
            eval: EvalTrainConfig {
                lr: 0.01,
                steps: 20,
                momentum: 0.0,
            },
            ..DistillConfig::default()
        }
    }

    #[test]
    fn conditional_update_cases() {
        let spec = ModelSpec::channel_linear(1, 1, 1);
        let syn = SyntheticDataset::new(1, 1, 1, 1, vec![3.0, 1.0]).unwrap();
        let zero_teacher = [0.0, 0.0];
        assert_eq!(conditional_update(&syn, &spec, &zero_teacher, 0.0).unwrap(), syn);
        let out = conditional_update(&syn, &spec, &zero_teacher, 0.01).unwrap();
        assert!((out.data[1] - 0.99).abs() < 1e-12);
        assert_eq!(out.data[0], 3.0);
        let full = conditional_update(&syn, &spec, &[2.0, 0.5], 1.0).unwrap();
        assert_eq!(full.data[1], 6.5);
        assert!(conditional_update(&syn, &spec, &zero_teacher, 1.5).is_err());
    }

    #[test]
    fn frozen_optimizer_keeps_data() {
        let (buffer, train, _) = setup();
        let cfg = DistillConfig {
            synthetic_lr: 0.0,
            ..small_cfg()
        };
        let syn = init_synthetic(&train, 2, 0).unwrap();
        let mut state = DistillState::new(syn.clone(), &cfg, 0);
        let loss = distill_step(&mut state, &cfg, &buffer, &train).unwrap();
        assert_eq!(state.synthetic, syn);
        assert!(loss.total.is_finite() && loss.l_param > 0.0);
    }

    #[test]
    fn disabled_terms_reduce_the_total() {
        let (buffer, train, _) = setup();
        let cfg = DistillConfig {
            alpha: 0.0,
            lambda_is: 0.0,
            ..small_cfg()
        };
        let mut state = DistillState::new(init_synthetic(&train, 2, 1).unwrap(), &cfg, 1);
        let l = distill_step(&mut state, &cfg, &buffer, &train).unwrap();
        assert_eq!(l.total, l.l_param + l.l_val_tmp);
        assert!(l.l_val_fre > 0.0);
    }

    #[test]
    fn run_counts_and_determinism() {
        let (buffer, train, val) = setup();
        let splits = RealSplits { train: &train, val: &val };
        let cfg = DistillConfig {
            iterations: 20,
            ..small_cfg()
        };
        let a = run_distillation(&cfg, &buffer, splits, 7, 1).unwrap();
        assert_eq!(a.conditional_updates, 4);
        assert_eq!(a.log.len(), 20);
        let evals: Vec<usize> = a.log.iter().filter(|r| r.eval.is_some()).map(|r| r.iteration).collect();
        assert_eq!(evals, vec![5, 10, 15, 20]);
        assert!(a.log.iter().all(|r| r.loss.recompute() == r.loss.total));
        assert!(a.best_val_mse.unwrap() <= a.final_val_mse.unwrap());
        assert_eq!(a.final_synthetic.data.len(), a.initial.data.len());

        let b = run_distillation(&cfg, &buffer, splits, 7, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        let threaded = run_distillation(&cfg, &buffer, splits, 7, 2).unwrap();
        assert_eq!(threaded.final_synthetic, a.final_synthetic);
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let (buffer, train, val) = setup();
        let cfg = DistillConfig {
            iterations: 0,
            ..small_cfg()
        };
        let r = run_distillation(&cfg, &buffer, RealSplits { train: &train, val: &val }, 3, 1).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(r.best, r.initial);
        assert_eq!(r.best, init_synthetic(&train, 2, derive_seed(3, stream::SYNTHETIC_INIT)).unwrap());
    }

    #[test]
    fn interval_is_inert_without_conditional_updates() {
        let (buffer, train, val) = setup();
        let splits = RealSplits { train: &train, val: &val };
        let base = DistillConfig {
            cond_coef: 0.0,
            ..small_cfg()
        };
        let a = run_distillation(&DistillConfig { interval: 2, ..base.clone() }, &buffer, splits, 4, 1).unwrap();
        let b = run_distillation(&DistillConfig { interval: 7, ..base }, &buffer, splits, 4, 1).unwrap();
        assert_eq!(a.final_synthetic, b.final_synthetic);
        assert_eq!(a.log, b.log);
        assert_eq!(a.conditional_updates, 0);
    }

    #[test]
    fn real_value_inputs_and_options() {
        let (buffer, train, val) = setup();
        let cfg = DistillConfig {
            value_input_source: ValueInputSource::Real,
            real_batch_size: 4,
            value_teacher: ValueTeacher::ExpertFinal,
            normalization: ParamNormalization::Global,
            max_grad_norm: Some(1e-3),
            ..small_cfg()
        };
        let r = run_distillation(&cfg, &buffer, RealSplits { train: &train, val: &val }, 5, 1).unwrap();
        assert_eq!(r.log.len(), 10);
        assert!(r.log.iter().all(|row| row.loss.total.is_finite()));
    }

    #[test]
    fn log_csv_shape() {
        let (buffer, train, val) = setup();
        let r = run_distillation(&small_cfg(), &buffer, RealSplits { train: &train, val: &val }, 2, 1).unwrap();
        let csv = run_log_csv(&r.log);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RUN_LOG_HEADER);
        assert_eq!(lines.len(), 11);
        assert!(lines[5].split(',').nth(6).is_some_and(|s| !s.is_empty()));
        assert!(lines[4].ends_with(",,"));
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { interval: 0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { cond_coef: 2.0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { alpha: -0.1, ..DistillConfig::default() }.validate().is_err());
    }
}
