//! Unnormalized forward DFT and the spectral L1 distance.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub coefficients: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// `e^{-2πi m / T}` for `m = 0..T`, indexed by `k·n mod T`.
fn twiddles(t: usize) -> Vec<Complex64> {
    (0..t)
        .map(|m| {
            let angle = -2.0 * PI * m as f64 / t as f64;
            Complex64::new(angle.cos(), angle.sin())
        })
        .collect()
}

/// `X_k = Σ_n x_n e^{-2πi k n / T}`, evaluated directly in O(T²).
pub fn dft(sequence: &[f64]) -> Spectrum {
    let t = sequence.len();
    let tw = twiddles(t);
    let coefficients = (0..t)
        .map(|k| {
            sequence
                .iter()
                .enumerate()
                .map(|(n, &x)| tw[(k * n) % t] * x)
                .sum()
        })
        .collect();
    Spectrum { coefficients }
}

/// `|X_k|² / T` per bin.
pub fn power_spectrum(sequence: &[f64]) -> Vec<f64> {
    let t = sequence.len() as f64;
    dft(sequence).coefficients.iter().map(|c| c.norm_sqr() / t).collect()
}

/// `Σ_k |dft(a)_k − dft(b)_k|` with the complex modulus per bin.
pub fn spectral_l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(dft(&diff).coefficients.iter().map(|c| c.norm()).sum())
}

/// Value and gradient of `spectral_l1(a, b)` with respect to `a`; the
/// gradient with respect to `b` is the negation. Bins whose difference is
/// exactly zero contribute the zero subgradient.
pub fn spectral_l1_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let t = a.len();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let spec = dft(&diff);
    let tw = twiddles(t);
    let mut value = 0.0;
    let mut unit = Vec::with_capacity(t);
    for c in &spec.coefficients {
        let m = c.norm();
        value += m;
        unit.push(if m > 0.0 { c.conj() / m } else { Complex64::new(0.0, 0.0) });
    }
    // d|X_k|/dx_n = Re(conj(X_k) e^{-2πikn/T}) / |X_k|
    let grad = (0..t)
        .map(|n| (0..t).map(|k| (unit[k] * tw[(k * n) % t]).re).sum())
        .collect();
    Ok((value, grad))
}
