//! Teacher trajectories: training, `DDTB` replay-buffer files and segment
//! sampling.
//!
//! `DDTB` v1, little-endian:
//!
//! ```text
//! "DDTB" | u16 version=1 | u16 model kind | u32 t_in | u32 t_out | u32 n_vars
//! | u32 hidden count | u32 × hidden count | u32 trajectories
//! | u32 checkpoints per trajectory | u64 param_dim
//! | per trajectory: u64 seed
//!                   checkpoints × param_dim f32
//!                   4 × epochs f64 (train MSE, test MSE, train MAE, test MAE)
//! | u32 CRC32 of every preceding byte
//! ```
//!
//! A JSON sidecar with the same stem mirrors the header.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::eval::dataset_metrics;
use crate::models::{init_params, loss_and_grad, param_sq_distance, ModelKind, ModelSpec, SgdMomentum};
use crate::rng::{derive_seed, seeded};

pub const DDTB_MAGIC: &[u8; 4] = b"DDTB";
pub const DDTB_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrajectory {
    /// Initialization followed by one checkpoint per epoch, rounded to f32.
    pub checkpoints: Vec<Vec<f64>>,
    pub seed: u64,
    pub train_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
    pub train_mae: Vec<f64>,
    pub test_mae: Vec<f64>,
}

impl ExpertTrajectory {
    pub fn epochs(&self) -> usize {
        self.checkpoints.len().saturating_sub(1)
    }

    pub fn final_checkpoint(&self) -> &[f64] {
        self.checkpoints.last().expect("trajectory has at least the initialization")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            lr: 5e-4,
            momentum: 0.9,
        }
    }
}

fn quantize(params: &[f64]) -> Vec<f64> {
    params.iter().map(|&p| p as f32 as f64).collect()
}

/// Shuffled mini-batch SGD with momentum; a checkpoint after the
/// initialization and after every epoch, with train/test metrics per epoch.
pub fn train_teacher(
    train: &WindowedDataset,
    test: &WindowedDataset,
    spec: &ModelSpec,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<ExpertTrajectory> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    spec.validate()?;
    let mut params = init_params(spec, derive_seed(seed, 0)).0;
    let mut rng = seeded(derive_seed(seed, 1));
    let mut opt = SgdMomentum::new(params.len(), cfg.lr, cfg.momentum);
    let mut traj = ExpertTrajectory {
        checkpoints: vec![quantize(&params)],
        seed,
        train_mse: Vec::with_capacity(cfg.epochs),
        test_mse: Vec::with_capacity(cfg.epochs),
        train_mae: Vec::with_capacity(cfg.epochs),
        test_mae: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train.pairs[i].clone()).collect();
            let (loss, grad) = loss_and_grad(spec, &params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("teacher loss in epoch {epoch}")));
            }
            opt.step(&mut params, &grad)?;
        }
        let (tr_mse, tr_mae) = dataset_metrics(spec, &params, train)?;
        if !tr_mse.is_finite() {
            return Err(Error::Divergence(format!("teacher train MSE after epoch {epoch}")));
        }
        let (te_mse, te_mae) = dataset_metrics(spec, &params, test)?;
        traj.checkpoints.push(quantize(&params));
        traj.train_mse.push(tr_mse);
        traj.test_mse.push(te_mse);
        traj.train_mae.push(tr_mae);
        traj.test_mae.push(te_mae);
    }
    Ok(traj)
}

/// Seed of teacher `index` under a master seed.
pub fn teacher_seed(master: u64, index: usize) -> u64 {
    derive_seed(derive_seed(master, crate::rng::stream::TEACHERS), index as u64)
}

/// Trains `count` teachers, spread over up to `threads` workers. Each
/// teacher depends only on its own seed, so output is thread-count independent.
pub fn train_teachers(
    train: &WindowedDataset,
    test: &WindowedDataset,
    spec: &ModelSpec,
    cfg: &TeacherConfig,
    count: usize,
    master_seed: u64,
    threads: usize,
) -> Result<Vec<ExpertTrajectory>> {
    let indices: Vec<usize> = (0..count).collect();
    let run = |part: &[usize]| -> Result<Vec<ExpertTrajectory>> {
        part.iter()
            .map(|&i| train_teacher(train, test, spec, cfg, teacher_seed(master_seed, i)))
            .collect()
    };
    if threads <= 1 || count <= 1 {
        return run(&indices);
    }
    let chunk = count.div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices.chunks(chunk).map(|part| scope.spawn(move || run(part))).collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("teacher worker panicked")?);
        }
        Ok(out)
    })
}

pub const METRICS_HEADER: &str = "epoch,train_mse,test_mse,train_mae,test_mae";

/// Per-epoch metric curves as delimited text, one row per epoch.
pub fn metrics_csv(traj: &ExpertTrajectory) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in 0..traj.epochs() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e + 1,
            traj.train_mse[e],
            traj.test_mse[e],
            traj.train_mae[e],
            traj.test_mae[e]
        ));
    }
    out
}

/// Teachers trained on real data, all sharing one model spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBuffer {
    pub spec: ModelSpec,
    pub trajectories: Vec<ExpertTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferMetadata {
    pub format: String,
    pub version: u16,
    pub model: ModelSpec,
    pub trajectories: usize,
    pub checkpoints_per_trajectory: usize,
    pub param_dim: usize,
    pub seeds: Vec<u64>,
}

impl ExpertBuffer {
    pub fn metadata(&self) -> BufferMetadata {
        BufferMetadata {
            format: "DDTB".into(),
            version: DDTB_VERSION,
            model: self.spec.clone(),
            trajectories: self.trajectories.len(),
            checkpoints_per_trajectory: self.trajectories.first().map_or(0, |t| t.checkpoints.len()),
            param_dim: self.spec.parameter_count(),
            seeds: self.trajectories.iter().map(|t| t.seed).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let Some(first) = self.trajectories.first() else {
            return Err(Error::InvalidArgument("cannot save an empty buffer".into()));
        };
        let n_ckpt = first.checkpoints.len();
        let epochs = first.epochs();
        let dim = self.spec.parameter_count();
        for t in &self.trajectories {
            let curves = [&t.train_mse, &t.test_mse, &t.train_mae, &t.test_mae];
            if t.checkpoints.len() != n_ckpt
                || t.checkpoints.iter().any(|c| c.len() != dim)
                || curves.iter().any(|c| c.len() != epochs)
            {
                return Err(Error::ShapeMismatch("trajectories in one buffer must share their shape".into()));
            }
        }
        let mut enc = Encoder::new(DDTB_MAGIC, DDTB_VERSION);
        enc.u16(self.spec.kind.code());
        enc.u32(self.spec.t_in as u32);
        enc.u32(self.spec.t_out as u32);
        enc.u32(self.spec.n_vars as u32);
        let hidden: &[usize] = match self.spec.kind {
            ModelKind::ChannelLinear => &[],
            ModelKind::Mlp => &self.spec.hidden,
        };
        enc.u32(hidden.len() as u32);
        for &h in hidden {
            enc.u32(h as u32);
        }
        enc.u32(self.trajectories.len() as u32);
        enc.u32(n_ckpt as u32);
        enc.u64(dim as u64);
        for t in &self.trajectories {
            enc.u64(t.seed);
            for c in &t.checkpoints {
                for &p in c {
                    enc.f32(p as f32);
                }
            }
            for curve in [&t.train_mse, &t.test_mse, &t.train_mae, &t.test_mae] {
                for &v in curve {
                    enc.f64(v);
                }
            }
        }
        Ok(enc.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::open(bytes, DDTB_MAGIC, DDTB_VERSION)?;
        let code = dec.u16()?;
        let kind = ModelKind::from_code(code)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model kind code {code}")))?;
        let t_in = dec.u32()? as usize;
        let t_out = dec.u32()? as usize;
        let n_vars = dec.u32()? as usize;
        let n_hidden = dec.u32()? as usize;
        let hidden = (0..n_hidden).map(|_| dec.u32().map(|h| h as usize)).collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            kind,
            t_in,
            t_out,
            n_vars,
            hidden,
        };
        let n_traj = dec.u32()? as usize;
        let n_ckpt = dec.u32()? as usize;
        let dim = dec.u64()? as usize;
        if dim != spec.parameter_count() || n_ckpt == 0 {
            return Err(Error::ShapeMismatch(format!(
                "header declares {dim} parameters and {n_ckpt} checkpoints for {spec:?}"
            )));
        }
        let epochs = n_ckpt - 1;
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let seed = dec.u64()?;
            let mut checkpoints = Vec::with_capacity(n_ckpt);
            for _ in 0..n_ckpt {
                checkpoints.push((0..dim).map(|_| dec.f32().map(f64::from)).collect::<Result<Vec<_>>>()?);
            }
            let mut curves = (0..4).map(|_| (0..epochs).map(|_| dec.f64()).collect::<Result<Vec<_>>>());
            let mut next = || curves.next().expect("four curves");
            let (train_mse, test_mse, train_mae, test_mae) = (next()?, next()?, next()?, next()?);
            trajectories.push(ExpertTrajectory {
                checkpoints,
                seed,
                train_mse,
                test_mse,
                train_mae,
                test_mae,
            });
        }
        dec.finish()?;
        Ok(Self { spec, trajectories })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes one buffer file plus its metadata sidecar.
pub fn save_buffer(buffer: &ExpertBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, buffer.to_bytes()?)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&buffer.metadata())?)?;
    Ok(())
}

pub fn load_buffer(path: impl AsRef<Path>) -> Result<ExpertBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    ExpertBuffer::from_bytes(&std::fs::read(path)?)
}

pub fn buffer_file_name(index: usize) -> String {
    format!("replay_buffer_{index}.ddtb")
}

/// Splits trajectories into files of `group_size` (the last may be short).
pub fn save_buffers(buffer: &ExpertBuffer, dir: impl AsRef<Path>, group_size: usize) -> Result<Vec<PathBuf>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    let dir = dir.as_ref();
    buffer
        .trajectories
        .chunks(group_size)
        .enumerate()
        .map(|(i, group)| {
            let path = dir.join(buffer_file_name(i));
            save_buffer(
                &ExpertBuffer {
                    spec: buffer.spec.clone(),
                    trajectories: group.to_vec(),
                },
                &path,
            )?;
            Ok(path)
        })
        .collect()
}

/// Loads every `replay_buffer_*.ddtb` under `dir` in index order.
pub fn load_buffers(dir: impl AsRef<Path>) -> Result<ExpertBuffer> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?;
            let idx = name.strip_prefix("replay_buffer_")?.strip_suffix(".ddtb")?.parse().ok()?;
            Some((idx, p))
        })
        .collect();
    files.sort();
    let mut merged: Option<ExpertBuffer> = None;
    for (_, path) in files {
        let buf = load_buffer(&path)?;
        match &mut merged {
            None => merged = Some(buf),
            Some(m) => {
                if m.spec != buf.spec {
                    return Err(Error::ShapeMismatch(format!("{} holds a different model", path.display())));
                }
                m.trajectories.extend(buf.trajectories);
            }
        }
    }
    merged.ok_or_else(|| Error::MissingFile(dir.join(buffer_file_name(0))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    pub theta_start: Vec<f64>,
    pub theta_target: Vec<f64>,
    pub expert_index: usize,
    pub start_epoch: usize,
    pub span: usize,
}

/// Uniform expert among those with at least `span` epochs, then a uniform
/// start epoch in `[0, epochs − span]`.
pub fn sample_segment(trajectories: &[ExpertTrajectory], span: usize, rng: &mut ChaCha8Rng) -> Result<SegmentSample> {
    if span == 0 {
        return Err(Error::InvalidArgument("segment span must be at least 1".into()));
    }
    let eligible: Vec<usize> = (0..trajectories.len())
        .filter(|&i| trajectories[i].epochs() >= span)
        .collect();
    if eligible.is_empty() {
        return Err(Error::SpanTooLarge { span });
    }
    let expert_index = eligible[rng.gen_range(0..eligible.len())];
    let traj = &trajectories[expert_index];
    let start_epoch = rng.gen_range(0..=traj.epochs() - span);
    Ok(SegmentSample {
        theta_start: traj.checkpoints[start_epoch].clone(),
        theta_target: traj.checkpoints[start_epoch + span].clone(),
        expert_index,
        start_epoch,
        span,
    })
}

/// Resamples until the segment moves by more than `1e-20` in squared
/// distance, giving up after `max_tries`.
pub fn sample_moving_segment(
    trajectories: &[ExpertTrajectory],
    span: usize,
    rng: &mut ChaCha8Rng,
    max_tries: usize,
) -> Result<SegmentSample> {
    for _ in 0..max_tries.max(1) {
        let seg = sample_segment(trajectories, span, rng)?;
        if param_sq_distance(&seg.theta_target, &seg.theta_start)? > 1e-20 {
            return Ok(seg);
        }
    }
    Err(Error::DegenerateSegment)
}

/// Exhaustive form of the expert minimum: the normalized distance from
/// `theta_s` to every expert's segment `[start_epoch, start_epoch + span]`,
/// returning the closest expert and its loss.
pub fn closest_expert(
    trajectories: &[ExpertTrajectory],
    theta_s: &[f64],
    start_epoch: usize,
    span: usize,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trajectories.iter().enumerate() {
        if start_epoch + span > t.epochs() {
            continue;
        }
        let target = &t.checkpoints[start_epoch + span];
        let denom = param_sq_distance(target, &t.checkpoints[start_epoch])?;
        if !(denom > 0.0) {
            continue;
        }
        let loss = param_sq_distance(theta_s, target)? / denom;
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((i, loss));
        }
    }
    best.ok_or(Error::SpanTooLarge { span })
}
