//! Flat `section.key=value` run description and the data preparation it
//! drives. Unlisted keys keep their defaults; unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::buffer::TeacherConfig;
use crate::data::{load_series, slide_windows, split, Delimiter, RawSeries, SplitRatios, StandardizationStats, TextFormat, WindowedDataset};
use crate::distill::{DistillConfig, ParamNormalization, ValueInputSource, ValueTeacher};
use crate::error::{Error, Result};
use crate::models::{ModelKind, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_path: PathBuf,
    pub delimiter: Delimiter,
    pub standardize_epsilon: f64,
    pub split: SplitRatios,
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub model_kind: ModelKind,
    pub hidden: Vec<usize>,
    pub trajectories: usize,
    pub group_size: usize,
    pub teacher: TeacherConfig,
    /// Where `distill` looks for buffers; empty means `<output_dir>/buffers`.
    pub buffer_dir: PathBuf,
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data_path: PathBuf::from("data.csv"),
            delimiter: Delimiter::Auto,
            standardize_epsilon: 1e-8,
            split: SplitRatios::default(),
            t_in: 24,
            t_out: 24,
            stride: 12,
            model_kind: ModelKind::ChannelLinear,
            hidden: Vec::new(),
            trajectories: 40,
            group_size: 5,
            teacher: TeacherConfig::default(),
            buffer_dir: PathBuf::new(),
            distill: DistillConfig::default(),
        }
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("{key}: expected one of {names:?}, got {value:?}"))
    })
}

fn name_of<T: PartialEq + Copy>(value: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, v)| *v == value).map(|(n, _)| *n).expect("every variant is named")
}

const DELIMITERS: &[(&str, Delimiter)] = &[("auto", Delimiter::Auto), ("comma", Delimiter::Comma), ("tab", Delimiter::Tab)];
const KINDS: &[(&str, ModelKind)] = &[("channel_linear", ModelKind::ChannelLinear), ("mlp", ModelKind::Mlp)];
const SOURCES: &[(&str, ValueInputSource)] = &[("synthetic", ValueInputSource::Synthetic), ("real", ValueInputSource::Real)];
const TEACHERS: &[(&str, ValueTeacher)] = &[("segment_target", ValueTeacher::SegmentTarget), ("expert_final", ValueTeacher::ExpertFinal)];
const NORMS: &[(&str, ParamNormalization)] = &[("segment", ParamNormalization::Segment), ("global", ParamNormalization::Global)];

impl RunConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.distill;
        vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("data.path", self.data_path.display().to_string()),
            ("data.delimiter", name_of(self.delimiter, DELIMITERS).into()),
            ("data.epsilon", self.standardize_epsilon.to_string()),
            ("split.train", self.split.train.to_string()),
            ("split.val", self.split.val.to_string()),
            ("split.test", self.split.test.to_string()),
            ("window.t_in", self.t_in.to_string()),
            ("window.t_out", self.t_out.to_string()),
            ("window.stride", self.stride.to_string()),
            ("model.kind", name_of(self.model_kind, KINDS).into()),
            ("model.hidden", list(&self.hidden)),
            ("teachers.trajectories", self.trajectories.to_string()),
            ("teachers.group_size", self.group_size.to_string()),
            ("teachers.epochs", self.teacher.epochs.to_string()),
            ("teachers.batch_size", self.teacher.batch_size.to_string()),
            ("teachers.lr", self.teacher.lr.to_string()),
            ("teachers.momentum", self.teacher.momentum.to_string()),
            ("teachers.buffer_dir", self.buffer_dir.display().to_string()),
            ("distill.samples", d.samples.to_string()),
            ("distill.alpha", d.alpha.to_string()),
            ("distill.lambda_is", d.lambda_is.to_string()),
            ("distill.lambda_div", d.isib.lambda_div.to_string()),
            ("distill.tau", d.isib.tau.to_string()),
            ("distill.isib_epsilon", d.isib.epsilon.to_string()),
            ("distill.synthetic_lr", d.synthetic_lr.to_string()),
            ("distill.student_lr", d.student_lr.to_string()),
            ("distill.unroll_steps", d.unroll_steps.to_string()),
            ("distill.segment_span", d.segment_span.to_string()),
            ("distill.interval", d.interval.to_string()),
            ("distill.cond_coef", d.cond_coef.to_string()),
            ("distill.iterations", d.iterations.to_string()),
            ("distill.eval_every", d.eval_every.to_string()),
            ("distill.value_input_source", name_of(d.value_input_source, SOURCES).into()),
            ("distill.real_batch_size", d.real_batch_size.to_string()),
            ("distill.value_teacher", name_of(d.value_teacher, TEACHERS).into()),
            ("distill.normalization", name_of(d.normalization, NORMS).into()),
            ("distill.max_grad_norm", d.max_grad_norm.map_or("none".into(), |x| x.to_string())),
            ("distill.max_segment_tries", d.max_segment_tries.to_string()),
            ("eval.seeds", list(&d.eval_seeds)),
            ("eval.lr", d.eval.lr.to_string()),
            ("eval.steps", d.eval.steps.to_string()),
            ("eval.momentum", d.eval.momentum.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.distill;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "data.path" => self.data_path = PathBuf::from(value),
            "data.delimiter" => self.delimiter = choice(key, value, DELIMITERS)?,
            "data.epsilon" => self.standardize_epsilon = parse(key, value)?,
            "split.train" => self.split.train = parse(key, value)?,
            "split.val" => self.split.val = parse(key, value)?,
            "split.test" => self.split.test = parse(key, value)?,
            "window.t_in" => self.t_in = parse(key, value)?,
            "window.t_out" => self.t_out = parse(key, value)?,
            "window.stride" => self.stride = parse(key, value)?,
            "model.kind" => self.model_kind = choice(key, value, KINDS)?,
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "teachers.trajectories" => self.trajectories = parse(key, value)?,
            "teachers.group_size" => self.group_size = parse(key, value)?,
            "teachers.epochs" => self.teacher.epochs = parse(key, value)?,
            "teachers.batch_size" => self.teacher.batch_size = parse(key, value)?,
            "teachers.lr" => self.teacher.lr = parse(key, value)?,
            "teachers.momentum" => self.teacher.momentum = parse(key, value)?,
            "teachers.buffer_dir" => self.buffer_dir = PathBuf::from(value),
            "distill.samples" => d.samples = parse(key, value)?,
            "distill.alpha" => d.alpha = parse(key, value)?,
            "distill.lambda_is" => d.lambda_is = parse(key, value)?,
            "distill.lambda_div" => d.isib.lambda_div = parse(key, value)?,
            "distill.tau" => d.isib.tau = parse(key, value)?,
            "distill.isib_epsilon" => d.isib.epsilon = parse(key, value)?,
            "distill.synthetic_lr" => d.synthetic_lr = parse(key, value)?,
            "distill.student_lr" => d.student_lr = parse(key, value)?,
            "distill.unroll_steps" => d.unroll_steps = parse(key, value)?,
            "distill.segment_span" => d.segment_span = parse(key, value)?,
            "distill.interval" => d.interval = parse(key, value)?,
            "distill.cond_coef" => d.cond_coef = parse(key, value)?,
            "distill.iterations" => d.iterations = parse(key, value)?,
            "distill.eval_every" => d.eval_every = parse(key, value)?,
            "distill.value_input_source" => d.value_input_source = choice(key, value, SOURCES)?,
            "distill.real_batch_size" => d.real_batch_size = parse(key, value)?,
            "distill.value_teacher" => d.value_teacher = choice(key, value, TEACHERS)?,
            "distill.normalization" => d.normalization = choice(key, value, NORMS)?,
            "distill.max_grad_norm" => {
                d.max_grad_norm = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "distill.max_segment_tries" => d.max_segment_tries = parse(key, value)?,
            "eval.seeds" => d.eval_seeds = parse_list(key, value)?,
            "eval.lr" => d.eval.lr = parse(key, value)?,
            "eval.steps" => d.eval.steps = parse(key, value)?,
            "eval.momentum" => d.eval.momentum = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Blank lines and `#` comments are skipped; a repeated key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 || self.stride == 0 {
            return Err(Error::Config("window sizes and stride must be at least 1".into()));
        }
        if self.trajectories == 0 || self.group_size == 0 {
            return Err(Error::Config("teachers.trajectories and teachers.group_size must be at least 1".into()));
        }
        if self.teacher.epochs == 0 || self.teacher.batch_size == 0 {
            return Err(Error::Config("teachers.epochs and teachers.batch_size must be at least 1".into()));
        }
        if self.model_kind == ModelKind::Mlp && self.hidden.is_empty() {
            return Err(Error::Config("model.hidden is required for mlp".into()));
        }
        self.distill.validate()
    }

    pub fn model_spec(&self, n_vars: usize) -> ModelSpec {
        match self.model_kind {
            ModelKind::ChannelLinear => ModelSpec::channel_linear(self.t_in, self.t_out, n_vars),
            ModelKind::Mlp => ModelSpec::mlp(self.t_in, self.t_out, n_vars, self.hidden.clone()),
        }
    }

    pub fn resolved_buffer_dir(&self) -> PathBuf {
        if self.buffer_dir.as_os_str().is_empty() {
            self.output_dir.join("buffers")
        } else {
            self.buffer_dir.clone()
        }
    }
}

/// Windowed splits standardized with statistics fitted on the train segment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: StandardizationStats,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

pub fn prepare_series(series: &RawSeries, cfg: &RunConfig) -> Result<PreparedData> {
    let (train, val, test) = split(series, cfg.split)?;
    let stats = StandardizationStats::fit(&train, cfg.standardize_epsilon);
    let window = |s: &RawSeries| slide_windows(&stats.apply(s)?, cfg.t_in, cfg.t_out, cfg.stride);
    Ok(PreparedData {
        train: window(&train)?,
        val: window(&val)?,
        test: window(&test)?,
        stats,
    })
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let series = load_series(&cfg.data_path, TextFormat { delimiter: cfg.delimiter })?;
    prepare_series(&series, cfg)
}
