//! Loading, standardization, chronological splitting and sliding-window
//! extraction for multivariate series.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Multivariate series stored variable-major: `values[v * len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub n_vars: usize,
    pub len: usize,
    pub values: Vec<f64>,
    pub variable_names: Vec<String>,
    pub source_path: String,
}

impl RawSeries {
    pub fn from_variables(variables: Vec<Vec<f64>>) -> Result<Self> {
        let n_vars = variables.len();
        if n_vars == 0 || variables[0].is_empty() {
            return Err(Error::EmptyDataset);
        }
        let len = variables[0].len();
        if let Some(bad) = variables.iter().find(|v| v.len() != len) {
            return Err(Error::LengthMismatch {
                left: len,
                right: bad.len(),
            });
        }
        for (column, var) in variables.iter().enumerate() {
            if let Some(row) = var.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue { row, column });
            }
        }
        Ok(Self {
            n_vars,
            len,
            values: variables.concat(),
            variable_names: (0..n_vars).map(|v| format!("v{v}")).collect(),
            source_path: String::new(),
        })
    }

    pub fn variable(&self, v: usize) -> &[f64] {
        &self.values[v * self.len..(v + 1) * self.len]
    }

    /// Timesteps `[start, end)` of every variable.
    pub fn slice_time(&self, start: usize, end: usize) -> RawSeries {
        let values = (0..self.n_vars)
            .flat_map(|v| self.variable(v)[start..end].iter().copied())
            .collect();
        RawSeries {
            n_vars: self.n_vars,
            len: end - start,
            values,
            variable_names: self.variable_names.clone(),
            source_path: self.source_path.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Auto,
    Comma,
    Tab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TextFormat {
    pub delimiter: Delimiter,
}

fn is_numeric(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok()
}

/// Reads one timestep per row, one variable per column. A first row
/// containing any non-numeric cell is taken as the header.
pub fn load_series(path: impl AsRef<Path>, format: TextFormat) -> Result<RawSeries> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut series = parse_series(&text, format, path.to_path_buf())?;
    series.source_path = path.display().to_string();
    Ok(series)
}

pub fn parse_series(text: &str, format: TextFormat, origin: PathBuf) -> Result<RawSeries> {
    let delimiter = match format.delimiter {
        Delimiter::Comma => b',',
        Delimiter::Tab => b'\t',
        Delimiter::Auto => {
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            if first.contains('\t') {
                b'\t'
            } else {
                b','
            }
        }
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .from_reader(text.as_bytes());

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(origin));
    }

    let expected = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != expected {
            return Err(Error::RaggedRows {
                row: i,
                expected,
                found: row.len(),
            });
        }
    }

    // NaN/inf parse as f64, so the header test must not treat them as text.
    let header = if rows[0].iter().any(|c| !is_numeric(c)) {
        Some(rows.remove(0))
    } else {
        None
    };
    if rows.is_empty() {
        return Err(Error::EmptyFile(origin));
    }

    let len = rows.len();
    let mut values = vec![0.0; expected * len];
    for (t, row) in rows.iter().enumerate() {
        let line = t + usize::from(header.is_some());
        for (v, cell) in row.iter().enumerate() {
            let x: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row: line,
                column: v,
                cell: cell.clone(),
            })?;
            if !x.is_finite() {
                return Err(Error::NonFiniteValue { row: line, column: v });
            }
            values[v * len + t] = x;
        }
    }
    let variable_names = header.unwrap_or_else(|| (0..expected).map(|v| format!("v{v}")).collect());
    Ok(RawSeries {
        n_vars: expected,
        len,
        values,
        variable_names,
        source_path: origin.display().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl StandardizationStats {
    /// Population mean and std per variable.
    pub fn fit(series: &RawSeries, epsilon: f64) -> Self {
        let n = series.len as f64;
        let (mean, std) = (0..series.n_vars)
            .map(|v| {
                let xs = series.variable(v);
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .unzip();
        Self { mean, std, epsilon }
    }

    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        if series.n_vars != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "stats fit on {} variables, series has {}",
                self.mean.len(),
                series.n_vars
            )));
        }
        let mut out = series.clone();
        for v in 0..series.n_vars {
            let scale = self.std[v] + self.epsilon;
            let mean = self.mean[v];
            for x in &mut out.values[v * series.len..(v + 1) * series.len] {
                *x = if scale > 0.0 { (*x - mean) / scale } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn invert(&self, series: &RawSeries) -> RawSeries {
        let mut out = series.clone();
        for v in 0..series.n_vars {
            let scale = self.std[v] + self.epsilon;
            for x in &mut out.values[v * series.len..(v + 1) * series.len] {
                *x = self.mean[v] + scale * *x;
            }
        }
        out
    }
}

/// Standardizes each variable by its own population statistics.
pub fn standardize(series: &RawSeries, epsilon: f64) -> (RawSeries, StandardizationStats) {
    let stats = StandardizationStats::fit(series, epsilon);
    let out = stats.apply(series).expect("stats fit on the same series");
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Segment lengths for a chronological split: floor train, floor val,
/// remainder to test.
pub fn split_lengths(len: usize, ratios: SplitRatios) -> Result<(usize, usize, usize)> {
    let SplitRatios { train, val, test } = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios((train, val, test)));
    }
    let n_train = (train * len as f64 + 1e-9).floor() as usize;
    let n_val = (val * len as f64 + 1e-9).floor() as usize;
    let n_test = len.saturating_sub(n_train + n_val);
    for (segment, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(Error::EmptySplit { len, segment });
        }
    }
    Ok((n_train, n_val, n_test))
}

pub fn split(series: &RawSeries, ratios: SplitRatios) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let (n_train, n_val, _) = split_lengths(series.len, ratios)?;
    Ok((
        series.slice_time(0, n_train),
        series.slice_time(n_train, n_train + n_val),
        series.slice_time(n_train + n_val, series.len),
    ))
}

/// One supervised pair; arrays are variable-major `[n_vars × T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub start_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub pairs: Vec<WindowPair>,
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub n_vars: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn window_count(len: usize, t_in: usize, t_out: usize, stride: usize) -> usize {
    if len < t_in + t_out {
        0
    } else {
        (len - t_in - t_out) / stride + 1
    }
}

pub fn slide_windows(
    series: &RawSeries,
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "t_in, t_out and stride must be at least 1".into(),
        ));
    }
    let count = window_count(series.len, t_in, t_out, stride);
    if count == 0 {
        return Err(Error::NoWindows {
            len: series.len,
            t_in,
            t_out,
        });
    }
    let pairs = (0..count)
        .map(|w| {
            let start = w * stride;
            let mut input = Vec::with_capacity(series.n_vars * t_in);
            let mut target = Vec::with_capacity(series.n_vars * t_out);
            for v in 0..series.n_vars {
                let xs = series.variable(v);
                input.extend_from_slice(&xs[start..start + t_in]);
                target.extend_from_slice(&xs[start + t_in..start + t_in + t_out]);
            }
            WindowPair {
                input,
                target,
                start_index: start,
            }
        })
        .collect();
    Ok(WindowedDataset {
        pairs,
        t_in,
        t_out,
        stride,
        n_vars: series.n_vars,
    })
}

/// Uniform draws with replacement.
pub fn sample_window_indices(dataset: &WindowedDataset, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((0..count).map(|_| rng.gen_range(0..dataset.len())).collect())
}

pub fn sample_windows(dataset: &WindowedDataset, count: usize, seed: u64) -> Result<Vec<WindowPair>> {
    let mut rng = seeded(seed);
    let indices = sample_window_indices(dataset, count, &mut rng)?;
    Ok(indices.into_iter().map(|i| dataset.pairs[i].clone()).collect())
}
