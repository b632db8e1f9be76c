//! Exact gradient of the distillation objective with respect to the
//! synthetic data, through `K` unrolled student gradient steps.
//!
//! The student update is `θ_{t+1} = θ_t − lr·∇_θ L(θ_t, X, Y)` with `L` the
//! full-batch MSE on the synthetic rows. Walking the trace backwards with
//! `λ = ∂L_total/∂θ_{t+1}`:
//!
//! ```text
//! ∂L_total/∂θ_t += λ − lr·H_θθ λ
//! ∂L_total/∂X   −= lr·∇_X (λ·∇_θ L)
//! ∂L_total/∂Y   −= lr·∇_Y (λ·∇_θ L)
//! ```
//!
//! All three products come from one evaluation of the hand-written
//! reverse pass with parameters seeded as dual numbers `θ_t + ε·λ`: the
//! tangent of each returned gradient is its directional derivative along
//! `λ`, which is exactly the needed second-order term.

use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::losses::{isib_loss, isib_loss_grad, param_match_loss_with_denominator, total_loss, value_terms_grad, IsibConfig, LossBreakdown};
use crate::models::{forward_vjp, mse_grads_rows, param_sq_distance, predict_rows, rows_loss_and_grad, ModelSpec, ParameterVector};
use crate::synthetic::{SyntheticDataset, SyntheticGradient};

/// What the reverse pass needs from a student unroll. Parameters before
/// each step are kept; per-step activations are recomputed on the way
/// back, so storage is `K × parameter_count` plus the data block.
#[derive(Debug, Clone)]
pub struct UnrollTrace {
    pub spec: ModelSpec,
    pub lr: f64,
    pub params_before: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub rows: usize,
}

impl UnrollTrace {
    pub fn steps(&self) -> usize {
        self.params_before.len()
    }

    /// Number of f64 values held by the trace.
    pub fn stored_values(&self) -> usize {
        self.params_before.iter().map(Vec::len).sum::<usize>() + self.losses.len() + self.inputs.len() + self.targets.len()
    }

    /// Reruns the recorded steps from the first stored parameters.
    pub fn replay(&self) -> Result<ParameterVector> {
        let Some(first) = self.params_before.first() else {
            return Err(Error::InvalidArgument("empty trace has no starting point".into()));
        };
        let mut theta = first.clone();
        for _ in 0..self.steps() {
            let (_, g) = rows_loss_and_grad(&self.spec, &theta, &self.inputs, &self.targets)?;
            for (p, gi) in theta.iter_mut().zip(&g) {
                *p -= self.lr * gi;
            }
        }
        Ok(ParameterVector(theta))
    }
}

/// Plain gradient descent on the full synthetic batch.
pub fn unroll_student(
    theta_init: &[f64],
    synthetic: &SyntheticDataset,
    spec: &ModelSpec,
    k: usize,
    lr: f64,
) -> Result<(ParameterVector, UnrollTrace)> {
    if synthetic.t_in != spec.t_in || synthetic.t_out != spec.t_out {
        return Err(Error::ShapeMismatch("synthetic horizon does not match the model".into()));
    }
    let inputs = synthetic.inputs();
    let targets = synthetic.targets();
    let mut theta = theta_init.to_vec();
    let mut params_before = Vec::with_capacity(k);
    let mut losses = Vec::with_capacity(k);
    for step in 0..k {
        let (loss, g) = rows_loss_and_grad(spec, &theta, &inputs, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("student loss at unroll step {step}")));
        }
        params_before.push(theta.clone());
        losses.push(loss);
        for (p, gi) in theta.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    if !theta.iter().all(|x| x.is_finite()) {
        return Err(Error::Divergence("student parameters after unroll".into()));
    }
    let trace = UnrollTrace {
        spec: spec.clone(),
        lr,
        params_before,
        losses,
        inputs,
        targets,
        rows: synthetic.rows(),
    };
    Ok((ParameterVector(theta), trace))
}

/// Adds the path through every unrolled step to `direct_grads`.
pub fn backprop_to_synthetic(
    trace: &UnrollTrace,
    d_theta_final: &[f64],
    direct_grads: &SyntheticGradient,
) -> Result<SyntheticGradient> {
    let spec = &trace.spec;
    if d_theta_final.len() != spec.parameter_count()
        || direct_grads.d_inputs.len() != trace.inputs.len()
        || direct_grads.d_targets.len() != trace.targets.len()
    {
        return Err(Error::ShapeMismatch("trace and gradient shapes disagree".into()));
    }
    let mut out = direct_grads.clone();
    let xs: Vec<Dual> = trace.inputs.iter().map(|&x| Dual::constant(x)).collect();
    let ys: Vec<Dual> = trace.targets.iter().map(|&y| Dual::constant(y)).collect();
    let mut lambda = d_theta_final.to_vec();
    for theta in trace.params_before.iter().rev() {
        let seeded: Vec<Dual> = theta.iter().zip(&lambda).map(|(&p, &l)| Dual::new(p, l)).collect();
        let g = mse_grads_rows(spec, &seeded, &xs, &ys, trace.rows, true);
        for (o, d) in out.d_inputs.iter_mut().zip(&g.d_x) {
            *o -= trace.lr * d.eps;
        }
        for (o, d) in out.d_targets.iter_mut().zip(&g.d_y) {
            *o -= trace.lr * d.eps;
        }
        for (l, d) in lambda.iter_mut().zip(&g.d_params) {
            *l -= trace.lr * d.eps;
        }
    }
    Ok(out)
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` over every synthetic entry.
pub fn finite_diff_synthetic<F>(objective: F, synthetic: &SyntheticDataset, h: f64) -> Result<SyntheticGradient>
where
    F: Fn(&SyntheticDataset) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = synthetic.clone();
    let mut full = vec![0.0; synthetic.data.len()];
    for (i, out) in full.iter_mut().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = objective(&probe)?;
        probe.data[i] = orig - h;
        let minus = objective(&probe)?;
        probe.data[i] = orig;
        *out = (plus - minus) / (2.0 * h);
    }
    Ok(SyntheticGradient::from_full(synthetic, &full))
}

/// Where the value term takes its inputs from.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueInputs {
    /// The synthetic inputs themselves; gradient flows into them directly.
    Synthetic,
    /// A fixed block of real inputs, `rows × t_in`.
    Real(Vec<f64>),
}

/// One instance of the outer objective: a sampled expert segment, the
/// teacher used for the value term and the loss weights.
#[derive(Debug, Clone)]
pub struct MetaObjective<'a> {
    pub spec: &'a ModelSpec,
    pub theta_start: &'a [f64],
    pub theta_target: &'a [f64],
    pub teacher: &'a [f64],
    /// Normalizer of the parameter term; usually `‖θ_target − θ_start‖²`.
    pub denominator: f64,
    pub value_inputs: ValueInputs,
    pub alpha: f64,
    pub lambda_is: f64,
    pub isib: IsibConfig,
    pub unroll_steps: usize,
    pub student_lr: f64,
}

/// Direct partials of the outer objective at a fixed student endpoint.
#[derive(Debug, Clone)]
pub struct DirectTerms {
    pub breakdown: LossBreakdown,
    pub d_theta_final: Vec<f64>,
    pub synthetic: SyntheticGradient,
}

impl<'a> MetaObjective<'a> {
    pub fn segment_denominator(theta_start: &[f64], theta_target: &[f64]) -> Result<f64> {
        param_sq_distance(theta_target, theta_start)
    }

    fn value_block<'b>(&'b self, syn_inputs: &'b [f64]) -> &'b [f64] {
        match &self.value_inputs {
            ValueInputs::Synthetic => syn_inputs,
            ValueInputs::Real(xs) => xs,
        }
    }

    /// Loss terms that see the synthetic data without going through the
    /// unroll, and their partial derivatives.
    pub fn direct_terms(&self, synthetic: &SyntheticDataset, theta_final: &[f64]) -> Result<DirectTerms> {
        let spec = self.spec;
        let syn_inputs = synthetic.inputs();
        let xs = self.value_block(&syn_inputs);

        let l_param = param_match_loss_with_denominator(theta_final, self.theta_target, self.denominator)?;
        let mut d_theta: Vec<f64> = theta_final
            .iter()
            .zip(self.theta_target)
            .map(|(s, t)| 2.0 * (s - t) / self.denominator)
            .collect();

        let y_student = predict_rows(spec, theta_final, xs)?;
        let y_teacher = predict_rows(spec, self.teacher, xs)?;
        let (l_tmp, l_fre, d_pred) = value_terms_grad(&y_student, &y_teacher, spec.t_out, self.alpha)?;
        let mut grad = SyntheticGradient::zeros(synthetic);

        let (dp_student, dx_student) = forward_vjp(spec, theta_final, xs, &d_pred)?;
        for (d, g) in d_theta.iter_mut().zip(&dp_student) {
            *d += g;
        }
        if matches!(self.value_inputs, ValueInputs::Synthetic) {
            let neg: Vec<f64> = d_pred.iter().map(|g| -g).collect();
            let (_, dx_teacher) = forward_vjp(spec, self.teacher, xs, &neg)?;
            for ((o, a), b) in grad.d_inputs.iter_mut().zip(&dx_student).zip(&dx_teacher) {
                *o += a + b;
            }
        }

        let samples = synthetic.sample_slices();
        // still reported when its weight is zero
        let l_is = if self.lambda_is > 0.0 {
            let (l_is, isib_grads) = isib_loss_grad(&samples, &self.isib);
            let full: Vec<f64> = isib_grads.concat().into_iter().map(|g| self.lambda_is * g).collect();
            grad.add_assign(&SyntheticGradient::from_full(synthetic, &full));
            l_is
        } else {
            isib_loss(&samples, &self.isib)
        };

        let breakdown = total_loss(l_param, l_tmp, l_fre, l_is, self.alpha, self.lambda_is)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Divergence("total loss".into()));
        }
        Ok(DirectTerms {
            breakdown,
            d_theta_final: d_theta,
            synthetic: grad,
        })
    }

    pub fn evaluate(&self, synthetic: &SyntheticDataset) -> Result<LossBreakdown> {
        let (theta_final, _) = unroll_student(self.theta_start, synthetic, self.spec, self.unroll_steps, self.student_lr)?;
        Ok(self.direct_terms(synthetic, &theta_final)?.breakdown)
    }

    pub fn value_and_gradient(&self, synthetic: &SyntheticDataset) -> Result<(LossBreakdown, SyntheticGradient)> {
        let (theta_final, trace) =
            unroll_student(self.theta_start, synthetic, self.spec, self.unroll_steps, self.student_lr)?;
        let direct = self.direct_terms(synthetic, &theta_final)?;
        let grad = backprop_to_synthetic(&trace, &direct.d_theta_final, &direct.synthetic)?;
        if !grad.is_finite() {
            return Err(Error::Divergence("meta-gradient".into()));
        }
        Ok((direct.breakdown, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_synthetic(samples: usize, n_vars: usize, t_in: usize, t_out: usize, seed: u64) -> SyntheticDataset {
        let mut rng = seeded(seed);
        let n = samples * n_vars * (t_in + t_out);
        SyntheticDataset::new(samples, n_vars, t_in, t_out, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn scalar_geometric_unroll() {
        // x = 1, y = 0: θ' = θ − lr·2θ
        let spec = ModelSpec::channel_linear(1, 1, 1);
        let syn = SyntheticDataset::new(1, 1, 1, 1, vec![1.0, 0.0]).unwrap();
        let (theta, trace) = unroll_student(&[1.0, 0.0], &syn, &spec, 2, 0.1).unwrap();
        // bias also moves; with b0 = 0 the pair (w, b) evolves jointly
        let (w, b) = (theta[0], theta[1]);
        let mut ww = 1.0;
        let mut bb = 0.0;
        for _ in 0..2 {
            let e: f64 = ww + bb;
            ww -= 0.1 * 2.0 * e;
            bb -= 0.1 * 2.0 * e;
        }
        assert!((w - ww).abs() < 1e-15 && (b - bb).abs() < 1e-15);
        assert_eq!(trace.replay().unwrap(), theta);

        // without a bias path: 1 → 0.8 → 0.64
        let syn = SyntheticDataset::new(1, 1, 1, 1, vec![1.0, 0.0]).unwrap();
        let spec0 = ModelSpec::channel_linear(1, 1, 1);
        let mut theta = vec![1.0, 0.0];
        for _ in 0..2 {
            let (_, g) = rows_loss_and_grad(&spec0, &theta, &syn.inputs(), &syn.targets()).unwrap();
            theta[0] -= 0.1 * g[0];
        }
        assert!((theta[0] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_unroll_is_stationary() {
        let spec = ModelSpec::channel_linear(2, 1, 1);
        let syn = SyntheticDataset::new(1, 1, 2, 1, vec![2.0, 4.0, 3.0]).unwrap();
        let theta = [0.5, 0.5, 0.0];
        let (out, _) = unroll_student(&theta, &syn, &spec, 5, 0.3).unwrap();
        assert_eq!(out.0, theta.to_vec());
    }

    #[test]
    fn empty_unroll_passes_direct_gradient_through() {
        let spec = ModelSpec::channel_linear(2, 2, 1);
        let syn = random_synthetic(2, 1, 2, 2, 3);
        let theta = init_params(&spec, 1);
        let (_, trace) = unroll_student(&theta, &syn, &spec, 0, 0.1).unwrap();
        let mut direct = SyntheticGradient::zeros(&syn);
        direct.d_inputs[1] = 0.5;
        direct.d_targets[2] = -1.5;
        let out = backprop_to_synthetic(&trace, &vec![1.0; theta.len()], &direct).unwrap();
        assert_eq!(out, direct);

        let (_, trace) = unroll_student(&theta, &syn, &spec, 3, 0.1).unwrap();
        let zero = SyntheticGradient::zeros(&syn);
        let out = backprop_to_synthetic(&trace, &vec![0.0; theta.len()], &zero).unwrap();
        assert!(out.d_inputs.iter().chain(&out.d_targets).all(|g| *g == 0.0));
    }

    #[test]
    fn finite_difference_oracle_basics() {
        let syn = random_synthetic(2, 1, 2, 2, 8);
        let g = finite_diff_synthetic(|s| Ok(s.data.iter().map(|x| x * x).sum()), &syn, 1e-4).unwrap();
        for (a, x) in g.to_full(&syn).iter().zip(&syn.data) {
            assert!((a - 2.0 * x).abs() < 1e-9);
        }
        let g = finite_diff_synthetic(|_| Ok(3.0), &syn, 1e-4).unwrap();
        assert!(g.to_full(&syn).iter().all(|v| *v == 0.0));
        assert!(finite_diff_synthetic(|_| Ok(3.0), &syn, 0.0).is_err());
    }

    fn check_against_fd(spec: &ModelSpec, syn: &SyntheticDataset, k: usize, value_inputs: ValueInputs, seed: u64) {
        let theta_start = init_params(spec, seed);
        let mut rng = seeded(seed + 77);
        let theta_target: Vec<f64> = theta_start.iter().map(|p| p + rng.gen_range(-0.3..0.3)).collect();
        let teacher: Vec<f64> = theta_target.iter().map(|p| p + rng.gen_range(-0.1..0.1)).collect();
        let objective = MetaObjective {
            spec,
            theta_start: &theta_start,
            theta_target: &theta_target,
            teacher: &teacher,
            denominator: MetaObjective::segment_denominator(&theta_start, &theta_target).unwrap(),
            value_inputs,
            alpha: 0.8,
            lambda_is: 0.6,
            isib: IsibConfig::default(),
            unroll_steps: k,
            student_lr: 0.05,
        };
        let (breakdown, analytic) = objective.value_and_gradient(syn).unwrap();
        assert_eq!(breakdown.recompute(), breakdown.total);
        let fd = finite_diff_synthetic(|s| Ok(objective.evaluate(s)?.total), syn, 1e-4).unwrap();
        for (a, f) in analytic.to_full(syn).iter().zip(fd.to_full(syn)) {
            let err = (a - f).abs();
            assert!(err <= 1e-4 * a.abs().max(f.abs()) || err < 1e-8, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let spec = ModelSpec::channel_linear(2, 2, 1);
        let syn = random_synthetic(2, 1, 2, 2, 21);
        check_against_fd(&spec, &syn, 3, ValueInputs::Synthetic, 1);

        let spec = ModelSpec::mlp(3, 2, 2, vec![4]);
        let syn = random_synthetic(3, 2, 3, 2, 22);
        check_against_fd(&spec, &syn, 2, ValueInputs::Synthetic, 2);

        let real: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        check_against_fd(&spec, &syn, 2, ValueInputs::Real(real), 3);
    }

    #[test]
    fn direct_terms_couple_samples_only_through_isib() {
        let spec = ModelSpec::channel_linear(3, 2, 1);
        let theta_start = init_params(&spec, 4);
        let theta_target: Vec<f64> = theta_start.iter().map(|p| p * 0.5 + 0.1).collect();
        let teacher = theta_target.clone();
        let syn = random_synthetic(3, 1, 3, 2, 5);
        let mut moved = syn.clone();
        for x in &mut moved.data[5..10] {
            *x += 0.4;
        }
        let sample0 = |g: &SyntheticGradient, s: &SyntheticDataset| g.to_full(s)[..5].to_vec();

        let mut objective = MetaObjective {
            spec: &spec,
            theta_start: &theta_start,
            theta_target: &theta_target,
            teacher: &teacher,
            denominator: 1.0,
            value_inputs: ValueInputs::Synthetic,
            alpha: 0.8,
            lambda_is: 0.0,
            isib: IsibConfig::default(),
            unroll_steps: 3,
            student_lr: 0.1,
        };
        let theta_final = init_params(&spec, 9);
        let a = objective.direct_terms(&syn, &theta_final).unwrap().synthetic;
        let b = objective.direct_terms(&moved, &theta_final).unwrap().synthetic;
        assert_eq!(sample0(&a, &syn), sample0(&b, &moved));

        objective.lambda_is = 0.6;
        let a = objective.direct_terms(&syn, &theta_final).unwrap().synthetic;
        let b = objective.direct_terms(&moved, &theta_final).unwrap().synthetic;
        assert_ne!(sample0(&a, &syn), sample0(&b, &moved));

        // the unrolled path couples every sample even without the ISIB term
        objective.lambda_is = 0.0;
        let (_, a) = objective.value_and_gradient(&syn).unwrap();
        let (_, b) = objective.value_and_gradient(&moved).unwrap();
        assert_ne!(sample0(&a, &syn), sample0(&b, &moved));
    }

    #[test]
    fn trace_storage_is_bounded() {
        let spec = ModelSpec::mlp(4, 3, 2, vec![5]);
        let syn = random_synthetic(3, 2, 4, 3, 6);
        let theta = init_params(&spec, 0);
        for k in [1, 4, 9] {
            let (_, trace) = unroll_student(&theta, &syn, &spec, k, 0.01).unwrap();
            assert_eq!(trace.steps(), k);
            let bound = k * spec.parameter_count() + k + syn.rows() * (spec.t_in + spec.t_out);
            assert_eq!(trace.stored_values(), bound);
        }
    }
}
