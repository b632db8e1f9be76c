//! Student evaluation on synthetic data and the diversity score.

use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::losses::{pairwise_sym_kl, IsibConfig};
use crate::models::{init_params, predict_rows, rows_loss_and_grad, stack_rows, ModelSpec, SgdMomentum};
use crate::synthetic::SyntheticDataset;

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

pub fn mse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / actual.len() as f64)
}

pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    Ok(actual.iter().zip(predicted).map(|(a, p)| (a - p).abs()).sum::<f64>() / actual.len() as f64)
}

/// MSE and MAE over every window, variable and horizon step.
pub fn dataset_metrics(spec: &ModelSpec, params: &[f64], dataset: &WindowedDataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (xs, ys) = stack_rows(spec, &dataset.pairs)?;
    let pred = predict_rows(spec, params, &xs)?;
    Ok((mse(&ys, &pred)?, mae(&ys, &pred)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Zero gives plain gradient descent.
    pub momentum: f64,
}

impl Default for EvalTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 500,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<SeedResult>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub condensation_ratio: f64,
    pub diversity: Option<f64>,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_seeds(per_seed: Vec<SeedResult>, condensation_ratio: f64, diversity: Option<f64>) -> Self {
        let ok: Vec<&SeedResult> = per_seed.iter().filter(|r| !r.diverged).collect();
        let (mse_mean, mse_std) = mean_std(&ok.iter().map(|r| r.mse).collect::<Vec<_>>());
        let (mae_mean, mae_std) = mean_std(&ok.iter().map(|r| r.mae).collect::<Vec<_>>());
        Self {
            per_seed,
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
            condensation_ratio,
            diversity,
        }
    }

    pub fn diverged_seeds(&self) -> Vec<u64> {
        self.per_seed.iter().filter(|r| r.diverged).map(|r| r.seed).collect()
    }

    /// Delimited rows: one per seed, then the aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,mse,mae,diverged\n");
        for r in &self.per_seed {
            out.push_str(&format!("{},{},{},{}\n", r.seed, r.mse, r.mae, r.diverged));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "MSE {:.6} ± {:.6}\nMAE {:.6} ± {:.6}\ncondensation ratio {:.6}\n",
            self.mse_mean, self.mse_std, self.mae_mean, self.mae_std, self.condensation_ratio
        );
        if let Some(d) = self.diversity {
            s.push_str(&format!("diversity {d:.6}\n"));
        }
        let diverged = self.diverged_seeds();
        if !diverged.is_empty() {
            s.push_str(&format!("diverged seeds (excluded) {diverged:?}\n"));
        }
        s
    }
}

/// Full-batch training of one fresh student on the synthetic pairs.
pub fn train_student(spec: &ModelSpec, synthetic: &SyntheticDataset, cfg: &EvalTrainConfig, seed: u64) -> Result<Vec<f64>> {
    let xs = synthetic.inputs();
    let ys = synthetic.targets();
    let mut params = init_params(spec, seed).0;
    let mut opt = SgdMomentum::new(params.len(), cfg.lr, cfg.momentum);
    for step in 0..cfg.steps {
        let (loss, g) = rows_loss_and_grad(spec, &params, &xs, &ys)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("student loss at step {step}")));
        }
        opt.step(&mut params, &g)?;
    }
    if !params.iter().all(|p| p.is_finite()) {
        return Err(Error::Divergence("student parameters".into()));
    }
    Ok(params)
}

fn evaluate_seed(
    synthetic: &SyntheticDataset,
    test_set: &WindowedDataset,
    spec: &ModelSpec,
    cfg: &EvalTrainConfig,
    seed: u64,
) -> Result<SeedResult> {
    let diverged = SeedResult {
        seed,
        mse: f64::NAN,
        mae: f64::NAN,
        diverged: true,
    };
    match train_student(spec, synthetic, cfg, seed) {
        Ok(params) => {
            let (mse, mae) = dataset_metrics(spec, &params, test_set)?;
            if mse.is_finite() && mae.is_finite() {
                Ok(SeedResult {
                    seed,
                    mse,
                    mae,
                    diverged: false,
                })
            } else {
                Ok(diverged)
            }
        }
        Err(Error::Divergence(_)) => Ok(diverged),
        Err(e) => Err(e),
    }
}

/// Trains one student per seed and evaluates it on `test_set`. Seeds are
/// spread over up to `threads` workers; rows come back in seed order.
pub fn train_and_eval(
    synthetic: &SyntheticDataset,
    test_set: &WindowedDataset,
    spec: &ModelSpec,
    seeds: &[u64],
    cfg: &EvalTrainConfig,
    real_train_windows: usize,
    threads: usize,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one evaluation seed is required".into()));
    }
    let per_seed: Vec<SeedResult> = if threads <= 1 {
        seeds
            .iter()
            .map(|&s| evaluate_seed(synthetic, test_set, spec, cfg, s))
            .collect::<Result<_>>()?
    } else {
        let chunk = seeds.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&s| evaluate_seed(synthetic, test_set, spec, cfg, s))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(seeds.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let ratio = if real_train_windows > 0 {
        synthetic.samples as f64 / real_train_windows as f64
    } else {
        f64::NAN
    };
    Ok(EvalReport::from_seeds(per_seed, ratio, None))
}

/// Mean pairwise symmetric KL between the sample distributions.
pub fn diversity(synthetic: &SyntheticDataset, cfg: &IsibConfig) -> Result<f64> {
    if synthetic.samples < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two samples".into()));
    }
    let pairs = pairwise_sym_kl(&synthetic.sample_slices(), cfg);
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}
