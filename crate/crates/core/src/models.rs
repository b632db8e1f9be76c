//! Per-channel forecasting models with analytic gradients, plus the two
//! optimizers used by the pipeline.
//!
//! Both model kinds share one parameter layout: a stack of dense layers
//! `[t_in, hidden.., t_out]`, each stored as its weight matrix (row-major,
//! `out × in`) followed by its bias. `ChannelLinear` is the stack with no
//! hidden layers. Every variable of a window is pushed through the same
//! network independently, so a `[n_vars × T]` array is just `n_vars` rows.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowPair;
use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ChannelLinear,
    Mlp,
}

impl ModelKind {
    pub fn code(self) -> u16 {
        match self {
            ModelKind::ChannelLinear => 0,
            ModelKind::Mlp => 1,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(ModelKind::ChannelLinear),
            1 => Some(ModelKind::Mlp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub t_in: usize,
    pub t_out: usize,
    pub n_vars: usize,
    /// Hidden widths; ignored for `ChannelLinear`.
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn channel_linear(t_in: usize, t_out: usize, n_vars: usize) -> Self {
        Self {
            kind: ModelKind::ChannelLinear,
            t_in,
            t_out,
            n_vars,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(t_in: usize, t_out: usize, n_vars: usize, hidden: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Mlp,
            t_in,
            t_out,
            n_vars,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 || self.n_vars == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if self.kind == ModelKind::Mlp && (self.hidden.is_empty() || self.hidden.contains(&0)) {
            return Err(Error::InvalidArgument("mlp needs non-zero hidden widths".into()));
        }
        Ok(())
    }

    fn hidden_layers(&self) -> &[usize] {
        match self.kind {
            ModelKind::ChannelLinear => &[],
            ModelKind::Mlp => &self.hidden,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.t_in];
        dims.extend_from_slice(self.hidden_layers());
        dims.push(self.t_out);
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterVector(pub Vec<f64>);

impl Deref for ParameterVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl ParameterVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Weights uniform in `±1/sqrt(fan_in)` per layer, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(spec.parameter_count());
    for w in spec.layer_dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector(out)
}

/// Layer outputs kept for the backward pass; `acts[0]` holds the inputs.
pub(crate) struct Tape<T> {
    acts: Vec<Vec<T>>,
}

impl<T> Tape<T> {
    pub(crate) fn output(&self) -> &[T] {
        self.acts.last().expect("tape always holds the input")
    }
}

pub(crate) fn forward_rows<T: Scalar>(spec: &ModelSpec, params: &[T], xs: &[T], rows: usize) -> Tape<T> {
    let dims = spec.layer_dims();
    let n_layers = dims.len() - 1;
    let mut acts = Vec::with_capacity(dims.len());
    acts.push(xs.to_vec());
    let mut offset = 0;
    for l in 0..n_layers {
        let (din, dout) = (dims[l], dims[l + 1]);
        let w = &params[offset..offset + din * dout];
        let b = &params[offset + din * dout..offset + din * dout + dout];
        offset += din * dout + dout;
        let prev = &acts[l];
        let mut next = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            let a = &prev[r * din..(r + 1) * din];
            for o in 0..dout {
                let mut z = b[o];
                for (wi, ai) in w[o * din..(o + 1) * din].iter().zip(a) {
                    z += *wi * *ai;
                }
                next.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
        }
        acts.push(next);
    }
    Tape { acts }
}

/// Vector-Jacobian product of the forward pass. Returns the parameter
/// gradient and, when requested, the input gradient.
pub(crate) fn backward_rows<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    tape: &Tape<T>,
    d_out: &[T],
    rows: usize,
    want_dx: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let dims = spec.layer_dims();
    let n_layers = dims.len() - 1;
    let mut d_params = vec![T::zero(); params.len()];
    let mut offsets = Vec::with_capacity(n_layers);
    let mut offset = 0;
    for l in 0..n_layers {
        offsets.push(offset);
        offset += dims[l] * dims[l + 1] + dims[l + 1];
    }

    let mut delta = d_out.to_vec();
    for l in (0..n_layers).rev() {
        let (din, dout) = (dims[l], dims[l + 1]);
        let off = offsets[l];
        let w = &params[off..off + din * dout];
        let a_prev = &tape.acts[l];
        {
            let (dw, db) = d_params[off..off + din * dout + dout].split_at_mut(din * dout);
            for r in 0..rows {
                let a = &a_prev[r * din..(r + 1) * din];
                for o in 0..dout {
                    let g = delta[r * dout + o];
                    db[o] += g;
                    for (dwi, ai) in dw[o * din..(o + 1) * din].iter_mut().zip(a) {
                        *dwi += g * *ai;
                    }
                }
            }
        }
        if l == 0 && !want_dx {
            break;
        }
        let mut d_prev = vec![T::zero(); rows * din];
        for r in 0..rows {
            for o in 0..dout {
                let g = delta[r * dout + o];
                for (dp, wi) in d_prev[r * din..(r + 1) * din]
                    .iter_mut()
                    .zip(&w[o * din..(o + 1) * din])
                {
                    *dp += g * *wi;
                }
            }
        }
        if l > 0 {
            // through tanh of the previous hidden layer
            for (dp, a) in d_prev.iter_mut().zip(a_prev) {
                *dp = *dp * (T::from_f64(1.0) - *a * *a);
            }
        }
        delta = d_prev;
    }
    let dx = if want_dx { Some(delta) } else { None };
    (d_params, dx)
}

/// Mean squared error over `rows × t_out` entries with gradients for the
/// parameters, the inputs and the targets.
pub(crate) struct RowGrads<T> {
    pub loss: T,
    pub d_params: Vec<T>,
    pub d_x: Vec<T>,
    pub d_y: Vec<T>,
}

pub(crate) fn mse_grads_rows<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    xs: &[T],
    ys: &[T],
    rows: usize,
    want_data: bool,
) -> RowGrads<T> {
    let tape = forward_rows(spec, params, xs, rows);
    let n = (rows * spec.t_out) as f64;
    let mut loss = T::zero();
    let mut d_out = Vec::with_capacity(ys.len());
    for (p, y) in tape.output().iter().zip(ys) {
        let e = *p - *y;
        loss += e * e;
        d_out.push(e.scale(2.0 / n));
    }
    let loss = loss.scale(1.0 / n);
    let (d_params, d_x) = backward_rows(spec, params, &tape, &d_out, rows, want_data);
    let d_y = if want_data {
        d_out.iter().map(|g| -*g).collect()
    } else {
        Vec::new()
    };
    RowGrads {
        loss,
        d_params,
        d_x: d_x.unwrap_or_default(),
        d_y,
    }
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.parameter_count() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} parameters, got {}",
            spec.parameter_count(),
            params.len()
        )));
    }
    Ok(())
}

/// Predictions for a batch of rows (`rows × t_in` in, `rows × t_out` out).
pub fn predict_rows(spec: &ModelSpec, params: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    if !xs.len().is_multiple_of(spec.t_in) {
        return Err(Error::ShapeMismatch(format!(
            "input length {} is not a multiple of t_in={}",
            xs.len(),
            spec.t_in
        )));
    }
    let rows = xs.len() / spec.t_in;
    Ok(forward_rows(spec, params, xs, rows).acts.pop().unwrap_or_default())
}

/// Forecast for one window input `[n_vars × t_in]`.
pub fn forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.n_vars * spec.t_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, expected {}×{}",
            x.len(),
            spec.n_vars,
            spec.t_in
        )));
    }
    predict_rows(spec, params, x)
}

/// Gradient of `Σ d_out · M(xs)` with respect to parameters and inputs.
pub fn forward_vjp(spec: &ModelSpec, params: &[f64], xs: &[f64], d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_params(spec, params)?;
    let rows = xs.len() / spec.t_in;
    if rows * spec.t_in != xs.len() || d_out.len() != rows * spec.t_out {
        return Err(Error::ShapeMismatch("vjp shapes disagree".into()));
    }
    let tape = forward_rows(spec, params, xs, rows);
    let (dp, dx) = backward_rows(spec, params, &tape, d_out, rows, true);
    Ok((dp, dx.unwrap_or_default()))
}

/// Stacks window pairs into row-major input and target blocks.
pub fn stack_rows(spec: &ModelSpec, batch: &[WindowPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::with_capacity(batch.len() * spec.n_vars * spec.t_in);
    let mut ys = Vec::with_capacity(batch.len() * spec.n_vars * spec.t_out);
    for pair in batch {
        if pair.input.len() != spec.n_vars * spec.t_in || pair.target.len() != spec.n_vars * spec.t_out {
            return Err(Error::ShapeMismatch(format!(
                "window at {} does not match the model spec",
                pair.start_index
            )));
        }
        xs.extend_from_slice(&pair.input);
        ys.extend_from_slice(&pair.target);
    }
    Ok((xs, ys))
}

/// MSE over batch, variables and horizon, with its exact parameter gradient.
pub fn loss_and_grad(spec: &ModelSpec, params: &[f64], batch: &[WindowPair]) -> Result<(f64, ParameterVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_params(spec, params)?;
    let (xs, ys) = stack_rows(spec, batch)?;
    let rows = batch.len() * spec.n_vars;
    let g = mse_grads_rows(spec, params, &xs, &ys, rows, false);
    Ok((g.loss, ParameterVector(g.d_params)))
}

/// Same objective on raw row blocks.
pub fn rows_loss_and_grad(spec: &ModelSpec, params: &[f64], xs: &[f64], ys: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_params(spec, params)?;
    let rows = xs.len() / spec.t_in;
    if rows == 0 {
        return Err(Error::EmptyBatch);
    }
    if rows * spec.t_in != xs.len() || ys.len() != rows * spec.t_out {
        return Err(Error::ShapeMismatch("row blocks disagree".into()));
    }
    let g = mse_grads_rows(spec, params, xs, ys, rows, false);
    Ok((g.loss, g.d_params))
}

pub fn param_sq_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Heavy-ball SGD: `v ← m·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || grad.len() != self.velocity.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grad.len(),
            });
        }
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self::with_betas(n, lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(n: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1)".into()));
        }
        if params.len() != grad.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grad.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
