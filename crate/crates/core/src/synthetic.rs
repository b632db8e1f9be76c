//! The learnable synthetic dataset and its `DDTS` file format.
//!
//! Layout `[S × N × (T_in + T_out)]`: sample-major, then variable, then
//! time. Each `(sample, variable)` row holds `T_in` input steps followed by
//! `T_out` target steps.
//!
//! `DDTS` v1: magic `DDTS`, u16 version, u32 S, u32 N, u32 T_in, u32 T_out,
//! `S·N·(T_in+T_out)` little-endian f64 values, CRC32 of all prior bytes.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::data::{sample_window_indices, WindowPair, WindowedDataset};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const DDTS_MAGIC: &[u8; 4] = b"DDTS";
pub const DDTS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub samples: usize,
    pub n_vars: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub data: Vec<f64>,
}

impl SyntheticDataset {
    pub fn new(samples: usize, n_vars: usize, t_in: usize, t_out: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 || n_vars == 0 || t_in == 0 || t_out == 0 {
            return Err(Error::InvalidArgument("synthetic dimensions must be positive".into()));
        }
        if data.len() != samples * n_vars * (t_in + t_out) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape [{samples}, {n_vars}, {}]",
                data.len(),
                t_in + t_out
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence("synthetic value".into()));
        }
        Ok(Self {
            samples,
            n_vars,
            t_in,
            t_out,
            data,
        })
    }

    pub fn from_pairs(pairs: &[WindowPair], n_vars: usize, t_in: usize, t_out: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(pairs.len() * n_vars * (t_in + t_out));
        for p in pairs {
            if p.input.len() != n_vars * t_in || p.target.len() != n_vars * t_out {
                return Err(Error::ShapeMismatch("window does not match synthetic shape".into()));
            }
            for v in 0..n_vars {
                data.extend_from_slice(&p.input[v * t_in..(v + 1) * t_in]);
                data.extend_from_slice(&p.target[v * t_out..(v + 1) * t_out]);
            }
        }
        Self::new(pairs.len(), n_vars, t_in, t_out, data)
    }

    pub fn horizon(&self) -> usize {
        self.t_in + self.t_out
    }

    pub fn rows(&self) -> usize {
        self.samples * self.n_vars
    }

    /// All `N × T` values of sample `s`.
    pub fn sample(&self, s: usize) -> &[f64] {
        let n = self.n_vars * self.horizon();
        &self.data[s * n..(s + 1) * n]
    }

    pub fn sample_slices(&self) -> Vec<&[f64]> {
        (0..self.samples).map(|s| self.sample(s)).collect()
    }

    /// Input block, `rows × t_in`.
    pub fn inputs(&self) -> Vec<f64> {
        self.data
            .chunks(self.horizon())
            .flat_map(|row| row[..self.t_in].iter().copied())
            .collect()
    }

    /// Target block, `rows × t_out`.
    pub fn targets(&self) -> Vec<f64> {
        self.data
            .chunks(self.horizon())
            .flat_map(|row| row[self.t_in..].iter().copied())
            .collect()
    }

    pub fn set_targets(&mut self, targets: &[f64]) {
        let (t_in, h, t_out) = (self.t_in, self.horizon(), self.t_out);
        for (row, y) in self.data.chunks_mut(h).zip(targets.chunks(t_out)) {
            row[t_in..].copy_from_slice(y);
        }
    }

    /// The synthetic samples as window pairs (variable-major arrays).
    pub fn to_pairs(&self) -> Vec<WindowPair> {
        (0..self.samples)
            .map(|s| {
                let sample = self.sample(s);
                let mut input = Vec::with_capacity(self.n_vars * self.t_in);
                let mut target = Vec::with_capacity(self.n_vars * self.t_out);
                for row in sample.chunks(self.horizon()) {
                    input.extend_from_slice(&row[..self.t_in]);
                    target.extend_from_slice(&row[self.t_in..]);
                }
                WindowPair {
                    input,
                    target,
                    start_index: s,
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DDTS_MAGIC, DDTS_VERSION);
        enc.u32(self.samples as u32);
        enc.u32(self.n_vars as u32);
        enc.u32(self.t_in as u32);
        enc.u32(self.t_out as u32);
        for &x in &self.data {
            enc.f64(x);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::open(bytes, DDTS_MAGIC, DDTS_VERSION)?;
        let samples = dec.u32()? as usize;
        let n_vars = dec.u32()? as usize;
        let t_in = dec.u32()? as usize;
        let t_out = dec.u32()? as usize;
        let n = samples
            .checked_mul(n_vars)
            .and_then(|v| v.checked_mul(t_in + t_out))
            .ok_or(Error::Truncated)?;
        let data = (0..n).map(|_| dec.f64()).collect::<Result<Vec<_>>>()?;
        dec.finish()?;
        Self::new(samples, n_vars, t_in, t_out, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Gradient with respect to the synthetic inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGradient {
    /// `rows × t_in`
    pub d_inputs: Vec<f64>,
    /// `rows × t_out`
    pub d_targets: Vec<f64>,
}

impl SyntheticGradient {
    pub fn zeros(syn: &SyntheticDataset) -> Self {
        Self {
            d_inputs: vec![0.0; syn.rows() * syn.t_in],
            d_targets: vec![0.0; syn.rows() * syn.t_out],
        }
    }

    /// Splits a gradient laid out like the synthetic tensor.
    pub fn from_full(syn: &SyntheticDataset, full: &[f64]) -> Self {
        let mut g = Self::zeros(syn);
        for (r, row) in full.chunks(syn.horizon()).enumerate() {
            g.d_inputs[r * syn.t_in..(r + 1) * syn.t_in].copy_from_slice(&row[..syn.t_in]);
            g.d_targets[r * syn.t_out..(r + 1) * syn.t_out].copy_from_slice(&row[syn.t_in..]);
        }
        g
    }

    /// Interleaves back into the synthetic tensor layout.
    pub fn to_full(&self, syn: &SyntheticDataset) -> Vec<f64> {
        let mut out = Vec::with_capacity(syn.data.len());
        for r in 0..syn.rows() {
            out.extend_from_slice(&self.d_inputs[r * syn.t_in..(r + 1) * syn.t_in]);
            out.extend_from_slice(&self.d_targets[r * syn.t_out..(r + 1) * syn.t_out]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &SyntheticGradient) {
        for (a, b) in self.d_inputs.iter_mut().zip(&other.d_inputs) {
            *a += b;
        }
        for (a, b) in self.d_targets.iter_mut().zip(&other.d_targets) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.d_inputs
            .iter()
            .chain(&self.d_targets)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for x in self.d_inputs.iter_mut().chain(self.d_targets.iter_mut()) {
            *x *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_inputs.iter().chain(&self.d_targets).all(|x| x.is_finite())
    }
}

/// Each sample is a randomly drawn real window, input and target
/// concatenated along time.
pub fn init_synthetic(real: &WindowedDataset, samples: usize, seed: u64) -> Result<SyntheticDataset> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one synthetic sample".into()));
    }
    let mut rng = seeded(seed);
    let idx = sample_window_indices(real, samples, &mut rng)?;
    let pairs: Vec<WindowPair> = idx.into_iter().map(|i| real.pairs[i].clone()).collect();
    SyntheticDataset::from_pairs(&pairs, real.n_vars, real.t_in, real.t_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{slide_windows, RawSeries};

    fn real() -> WindowedDataset {
        let a: Vec<f64> = (0..100).map(|t| (t as f64 * 0.3).sin()).collect();
        let b: Vec<f64> = (0..100).map(|t| (t as f64 * 0.1).cos()).collect();
        slide_windows(&RawSeries::from_variables(vec![a, b]).unwrap(), 24, 24, 12).unwrap()
    }

    #[test]
    fn init_draws_real_windows() {
        let ds = real();
        let syn = init_synthetic(&ds, 3, 9).unwrap();
        assert_eq!((syn.samples, syn.n_vars, syn.horizon()), (3, 2, 48));
        assert_eq!(syn.data.len(), 3 * 2 * 48);
        for p in syn.to_pairs() {
            assert!(ds.pairs.iter().any(|w| w.input == p.input && w.target == p.target));
        }
        assert_eq!(syn, init_synthetic(&ds, 3, 9).unwrap());
    }

    #[test]
    fn targets_and_inputs_round_trip() {
        let mut syn = init_synthetic(&real(), 2, 1).unwrap();
        let x = syn.inputs();
        let y = syn.targets();
        assert_eq!(x.len(), syn.rows() * 24);
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        syn.set_targets(&doubled);
        assert_eq!(syn.targets(), doubled);
        assert_eq!(syn.inputs(), x);

        let g = SyntheticGradient::from_full(&syn, &syn.data);
        assert_eq!(g.to_full(&syn), syn.data);
    }

    #[test]
    fn ddts_round_trip_and_corruption() {
        let syn = init_synthetic(&real(), 3, 4).unwrap();
        let bytes = syn.to_bytes();
        assert_eq!(&bytes[..4], b"DDTS");
        assert_eq!(bytes.len(), 4 + 2 + 16 + syn.data.len() * 8 + 4);
        let back = SyntheticDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, syn);

        let mut bad = bytes.clone();
        bad[40] ^= 0x01;
        assert!(matches!(SyntheticDataset::from_bytes(&bad), Err(Error::Checksum { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SyntheticDataset::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(SyntheticDataset::from_bytes(&bad), Err(Error::VersionMismatch(9))));

        assert!(SyntheticDataset::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(matches!(SyntheticDataset::from_bytes(&bytes[..3]), Err(Error::Truncated)));
    }
}
