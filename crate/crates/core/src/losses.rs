//! Scalar objectives of the distillation problem and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::param_sq_distance;
use crate::spectral::{spectral_l1, spectral_l1_grad};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_param: f64,
    pub l_val_tmp: f64,
    pub l_val_fre: f64,
    pub l_is: f64,
    pub alpha: f64,
    pub lambda_is: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute(&self) -> f64 {
        combine(self.l_param, self.l_val_tmp, self.l_val_fre, self.l_is, self.alpha, self.lambda_is)
    }
}

fn combine(l_param: f64, l_val_tmp: f64, l_val_fre: f64, l_is: f64, alpha: f64, lambda_is: f64) -> f64 {
    l_param + (1.0 - alpha) * l_val_tmp + alpha * l_val_fre + lambda_is * l_is
}

pub fn total_loss(
    l_param: f64,
    l_val_tmp: f64,
    l_val_fre: f64,
    l_is: f64,
    alpha: f64,
    lambda_is: f64,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    if lambda_is.is_nan() || lambda_is < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda_is must be >= 0, got {lambda_is}")));
    }
    Ok(LossBreakdown {
        l_param,
        l_val_tmp,
        l_val_fre,
        l_is,
        alpha,
        lambda_is,
        total: combine(l_param, l_val_tmp, l_val_fre, l_is, alpha, lambda_is),
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} entries", a.len(), b.len())));
    }
    Ok(())
}

/// Mean of squared differences over all entries.
pub fn value_temporal(y_s: &[f64], y_t: &[f64]) -> Result<f64> {
    check_same(y_s, y_t)?;
    if y_s.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(y_s.iter().zip(y_t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y_s.len() as f64)
}

fn rows_of(len: usize, horizon: usize) -> Result<usize> {
    if horizon == 0 || !len.is_multiple_of(horizon) || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{len} entries do not split into rows of {horizon}"
        )));
    }
    Ok(len / horizon)
}

/// Mean over rows (variables, and samples when stacked) of the spectral L1
/// distance between matching rows of length `horizon`.
pub fn value_frequency(y_s: &[f64], y_t: &[f64], horizon: usize) -> Result<f64> {
    check_same(y_s, y_t)?;
    let rows = rows_of(y_s.len(), horizon)?;
    let mut sum = 0.0;
    for (a, b) in y_s.chunks(horizon).zip(y_t.chunks(horizon)) {
        sum += spectral_l1(a, b)?;
    }
    Ok(sum / rows as f64)
}

pub fn value_combined(y_s: &[f64], y_t: &[f64], horizon: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * value_temporal(y_s, y_t)? + alpha * value_frequency(y_s, y_t, horizon)?)
}

/// Both value terms and the gradient of `(1−α)·tmp + α·fre` with respect
/// to the student predictions `y_s`.
pub fn value_terms_grad(y_s: &[f64], y_t: &[f64], horizon: usize, alpha: f64) -> Result<(f64, f64, Vec<f64>)> {
    check_alpha(alpha)?;
    check_same(y_s, y_t)?;
    let rows = rows_of(y_s.len(), horizon)?;
    let n = y_s.len() as f64;
    let mut tmp = 0.0;
    let mut grad: Vec<f64> = y_s
        .iter()
        .zip(y_t)
        .map(|(a, b)| {
            tmp += (a - b) * (a - b);
            (1.0 - alpha) * 2.0 * (a - b) / n
        })
        .collect();
    tmp /= n;
    let mut fre = 0.0;
    for (r, (a, b)) in y_s.chunks(horizon).zip(y_t.chunks(horizon)).enumerate() {
        let (v, g) = spectral_l1_grad(a, b)?;
        fre += v;
        for (dst, gi) in grad[r * horizon..(r + 1) * horizon].iter_mut().zip(g) {
            *dst += alpha * gi / rows as f64;
        }
    }
    Ok((tmp, fre / rows as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsibConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda_div: f64,
}

impl Default for IsibConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            epsilon: 1e-8,
            lambda_div: 0.5,
        }
    }
}

impl IsibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.lambda_div > 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid ISIB config {self:?}")));
        }
        Ok(())
    }
}

struct Standardized {
    logits: Vec<f64>,
    centered: Vec<f64>,
    sigma: f64,
    scale: f64,
}

fn standardized_logits(x: &[f64], cfg: &IsibConfig) -> Standardized {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let sigma = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    let scale = (sigma + cfg.epsilon) * cfg.tau;
    let logits = centered
        .iter()
        .map(|c| if scale > 0.0 { c / scale } else { 0.0 })
        .collect();
    Standardized {
        logits,
        centered,
        sigma,
        scale,
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Flattens a sample, standardizes it by its own mean and std, divides by
/// the temperature and applies a softmax.
pub fn sample_probabilities(x: &[f64], cfg: &IsibConfig) -> Vec<f64> {
    log_softmax(&standardized_logits(x, cfg).logits)
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::ZeroProbability(i));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("distribution sums to {s}")));
    }
    Ok(())
}

/// `½(KL(p‖q) + KL(q‖p)) = ½ Σ (p−q)·ln(p/q)`, natural log.
pub fn sym_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(sym_kl_log(&ln_all(p), &ln_all(q)))
}

fn ln_all(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.ln()).collect()
}

fn sym_kl_log(lp: &[f64], lq: &[f64]) -> f64 {
    0.5 * lp
        .iter()
        .zip(lq)
        .map(|(a, b)| (a.exp() - b.exp()) * (a - b))
        .sum::<f64>()
}

/// Pairwise symmetric KL between the sample distributions, in sorted
/// `(i, j)` order with `i < j`.
pub fn pairwise_sym_kl(samples: &[&[f64]], cfg: &IsibConfig) -> Vec<f64> {
    let logs: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| log_softmax(&standardized_logits(x, cfg).logits))
        .collect();
    let mut out = Vec::new();
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            out.push(sym_kl_log(&logs[i], &logs[j]));
        }
    }
    out
}

/// Mean over unordered pairs of `exp(−λ_div·symKL)`; zero for one sample.
pub fn isib_loss(samples: &[&[f64]], cfg: &IsibConfig) -> f64 {
    let pairs = pairwise_sym_kl(samples, cfg);
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|d| (-cfg.lambda_div * d).exp()).sum::<f64>() / pairs.len() as f64
}

/// Mean pairwise symmetric KL; reported for logging, not optimized.
pub fn mean_sym_kl(samples: &[&[f64]], cfg: &IsibConfig) -> f64 {
    let pairs = pairwise_sym_kl(samples, cfg);
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().sum::<f64>() / pairs.len() as f64
}

/// `isib_loss` and its gradient with respect to every entry of every sample.
pub fn isib_loss_grad(samples: &[&[f64]], cfg: &IsibConfig) -> (f64, Vec<Vec<f64>>) {
    let s = samples.len();
    let mut grads: Vec<Vec<f64>> = samples.iter().map(|x| vec![0.0; x.len()]).collect();
    if s < 2 {
        return (0.0, grads);
    }
    let stds: Vec<Standardized> = samples.iter().map(|x| standardized_logits(x, cfg)).collect();
    let logs: Vec<Vec<f64>> = stds.iter().map(|st| log_softmax(&st.logits)).collect();
    let probs: Vec<Vec<f64>> = logs.iter().map(|l| l.iter().map(|v| v.exp()).collect()).collect();
    let n_pairs = (s * (s - 1) / 2) as f64;

    // gradient with respect to each sample's probabilities
    let mut d_prob: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            let d = sym_kl_log(&logs[i], &logs[j]);
            let e = (-cfg.lambda_div * d).exp();
            loss += e;
            let w = -cfg.lambda_div * e / n_pairs;
            // ∂D/∂p_i = ½(ln(p_i/q_i) + 1 − q_i/p_i), symmetric in the roles
            for k in 0..probs[i].len() {
                let (p, q) = (probs[i][k], probs[j][k]);
                let lr = logs[i][k] - logs[j][k];
                d_prob[i][k] += w * 0.5 * (lr + 1.0 - q / p);
                d_prob[j][k] += w * 0.5 * (-lr + 1.0 - p / q);
            }
        }
    }

    for i in 0..s {
        let p = &probs[i];
        let g = &d_prob[i];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let d_logit: Vec<f64> = p.iter().zip(g).map(|(a, b)| a * (b - dot)).collect();
        let st = &stds[i];
        if st.scale <= 0.0 {
            continue;
        }
        let n = d_logit.len() as f64;
        let mean_dz = d_logit.iter().sum::<f64>() / n;
        let dz_dot_c: f64 = d_logit.iter().zip(&st.centered).map(|(a, b)| a * b).sum();
        for (k, out) in grads[i].iter_mut().enumerate() {
            let mut v = (d_logit[k] - mean_dz) / st.scale;
            if st.sigma > 0.0 {
                let dsigma = st.centered[k] / (n * st.sigma);
                v -= dz_dot_c * cfg.tau / (st.scale * st.scale) * dsigma;
            }
            *out = v;
        }
    }
    (loss / n_pairs, grads)
}

/// `‖θ_S − θ_target‖² / ‖θ_target − θ_start‖²`.
pub fn param_match_loss(theta_s: &[f64], theta_start: &[f64], theta_target: &[f64]) -> Result<f64> {
    let denom = param_sq_distance(theta_target, theta_start)?;
    param_match_loss_with_denominator(theta_s, theta_target, denom)
}

pub fn param_match_loss_with_denominator(theta_s: &[f64], theta_target: &[f64], denominator: f64) -> Result<f64> {
    if !(denominator > 0.0) {
        return Err(Error::DegenerateSegment);
    }
    Ok(param_sq_distance(theta_s, theta_target)? / denominator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn temporal_cases() {
        assert_eq!(value_temporal(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(value_temporal(&[1.0; 6], &[0.0; 6]).unwrap(), 1.0);
        assert_eq!(value_temporal(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(value_temporal(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn frequency_cases() {
        assert_eq!(value_frequency(&[0.5; 4], &[0.5; 4], 4).unwrap(), 0.0);
        let v = value_frequency(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], 4).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let a = [0.2, -1.0, 0.5, 0.7, 1.1, -0.3];
        let b = [0.0, 0.4, -0.2, 0.1, 0.9, 0.3];
        let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let b2: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
        let base = value_frequency(&a, &b, 3).unwrap();
        assert!((value_frequency(&a2, &b2, 3).unwrap() - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn combined_blend() {
        let a = [0.3, -0.2, 1.0, 0.0];
        let b = [0.1, 0.4, 0.2, -0.5];
        let tmp = value_temporal(&a, &b).unwrap();
        let fre = value_frequency(&a, &b, 2).unwrap();
        assert_eq!(value_combined(&a, &b, 2, 0.0).unwrap(), tmp);
        assert_eq!(value_combined(&a, &b, 2, 1.0).unwrap(), fre);
        assert!(value_combined(&a, &b, 2, 1.5).is_err());
        assert_eq!(0.5 * 2.0 + 0.5 * 4.0, 3.0);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let a = [0.3, -0.2, 1.0, 0.0, 0.6, -0.9];
        let b = [0.1, 0.4, 0.2, -0.5, 0.0, 0.3];
        let alpha = 0.8;
        let (_, _, g) = value_terms_grad(&a, &b, 3, alpha).unwrap();
        for i in 0..a.len() {
            let mut p = a;
            p[i] += 1e-6;
            let mut m = a;
            m[i] -= 1e-6;
            let fd = (value_combined(&p, &b, 3, alpha).unwrap() - value_combined(&m, &b, 3, alpha).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn probabilities_cases() {
        let cfg = IsibConfig::default();
        let p = sample_probabilities(&[4.0; 6], &cfg);
        assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        let cfg0 = IsibConfig {
            tau: 1.0,
            epsilon: 0.0,
            lambda_div: 0.5,
        };
        let p = sample_probabilities(&[1.0, 3.0], &cfg0);
        assert!((p[0] - 0.11920292202211755).abs() < 1e-12);
        assert!((p[1] - 0.8807970779778823).abs() < 1e-12);

        let hot = IsibConfig {
            tau: 1e6,
            ..cfg
        };
        let p = sample_probabilities(&[1.0, -3.0, 8.0, 0.5], &hot);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-5));
    }

    #[test]
    fn sym_kl_cases() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        assert_eq!(sym_kl(&p, &p).unwrap(), 0.0);
        let expected = 0.5 * ((0.5 - 0.9) * (0.5f64 / 0.9).ln() + (0.5 - 0.1) * (0.5f64 / 0.1).ln());
        assert!((sym_kl(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((sym_kl(&p, &q).unwrap() - 0.43945).abs() < 1e-5);
        assert!(matches!(sym_kl(&[1.0, 0.0], &p), Err(Error::ZeroProbability(1))));
        assert!(sym_kl(&[1.0], &p).is_err());
    }

    #[test]
    fn isib_cases() {
        let cfg = IsibConfig::default();
        let x = [0.1, 0.5, -0.3, 2.0];
        assert_eq!(isib_loss(&[&x, &x, &x], &cfg), 1.0);
        assert_eq!(isib_loss(&[&x], &cfg), 0.0);
        let y = [1.0, -0.2, 0.0, 0.4];
        let l = isib_loss(&[&x, &y], &cfg);
        let d = mean_sym_kl(&[&x, &y], &cfg);
        assert!((l - (-0.5 * d).exp()).abs() < 1e-15);
        assert!(l > 0.0 && l < 1.0);
    }

    #[test]
    fn isib_gradient_matches_finite_differences() {
        let cfg = IsibConfig {
            tau: 0.7,
            epsilon: 1e-3,
            lambda_div: 0.5,
        };
        let mut samples = [vec![0.1, 0.5, -0.3, 2.0, 0.7],
            vec![1.0, -0.2, 0.0, 0.4, -1.1],
            vec![0.3, 0.3, 0.9, -0.8, 0.2]];
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let (loss, grads) = isib_loss_grad(&refs, &cfg);
        assert!((loss - isib_loss(&refs, &cfg)).abs() < 1e-15);
        let h = 1e-6;
        for i in 0..samples.len() {
            for k in 0..samples[i].len() {
                let orig = samples[i][k];
                samples[i][k] = orig + h;
                let lp = isib_loss(&samples.iter().map(|s| s.as_slice()).collect::<Vec<_>>(), &cfg);
                samples[i][k] = orig - h;
                let lm = isib_loss(&samples.iter().map(|s| s.as_slice()).collect::<Vec<_>>(), &cfg);
                samples[i][k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grads[i][k]).abs() < 1e-8, "({i},{k}) fd {fd} vs {}", grads[i][k]);
            }
        }
    }

    #[test]
    fn param_match_cases() {
        let start = [0.0, 0.0, 1.0];
        let target = [2.0, -1.0, 3.0];
        assert_eq!(param_match_loss(&target, &start, &target).unwrap(), 0.0);
        assert_eq!(param_match_loss(&start, &start, &target).unwrap(), 1.0);
        let mid = [1.0, -0.5, 2.0];
        assert!((param_match_loss(&mid, &start, &target).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(param_match_loss(&mid, &start, &start), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn total_cases() {
        let b = total_loss(1.0, 1.0, 1.0, 1.0, 0.8, 0.6).unwrap();
        assert!((b.total - 2.6).abs() < 1e-12);
        assert_eq!(b.recompute(), b.total);
        let b = total_loss(0.3, 0.7, 5.0, 9.0, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 0.3 + 0.7);
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, -0.1, 0.6).is_err());
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, 0.5, -1.0).is_err());
    }

    fn distribution(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn sym_kl_is_symmetric_and_nonnegative(
            a in proptest::collection::vec(0.01f64..1.0, 6),
            b in proptest::collection::vec(0.01f64..1.0, 6),
        ) {
            let (p, q) = (distribution(&a), distribution(&b));
            let pq = sym_kl(&p, &q).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert_eq!(pq, sym_kl(&q, &p).unwrap());
        }

        #[test]
        fn blend_increases_with_frequency_term(
            tmp in 0.0f64..10.0,
            fre in 0.0f64..10.0,
            bump in 1e-3f64..5.0,
            alpha in 0.01f64..=1.0,
        ) {
            let lo = total_loss(0.0, tmp, fre, 0.0, alpha, 0.0).unwrap().total;
            let hi = total_loss(0.0, tmp, fre + bump, 0.0, alpha, 0.0).unwrap().total;
            prop_assert!(hi > lo);
        }

        #[test]
        fn isib_stays_in_unit_interval(xs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 5), 2..5)) {
            let refs: Vec<&[f64]> = xs.iter().map(|s| s.as_slice()).collect();
            let l = isib_loss(&refs, &IsibConfig::default());
            prop_assert!(l > 0.0 && l <= 1.0);
        }
    }
}
