//! Run configuration: flat `section.key = value` lines, `#` comments.
//!
//! ```text
//! data.seed = 7
//! data.n = 768
//! paradigm.kind = self_consistency
//! paradigm.alpha = 1
//! paradigm.beta = 0
//! train.iterations = 300
//! run.seed = 11
//! ```
//!
//! Unlisted keys keep their defaults; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{parse_modes, EvalMode};
use crate::paradigms::{ParadigmConfig, ParadigmKind, TrainConfig};
use crate::synthdata::DataConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub seed: u64,
    pub n: usize,
    pub generator: DataConfig,
    pub train_fraction: f64,
    /// Dataset file read by `train`; written by `gen-data` when no `--out` is given.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            n: 768,
            generator: DataConfig::default(),
            train_fraction: 2.0 / 3.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub vocab_path: Option<PathBuf>,
    pub paradigm: ParadigmConfig,
    pub train: TrainConfig,
    /// Write `ckpt_<iter>.txt` every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub eval_modes: Vec<EvalMode>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            vocab_path: None,
            paradigm: ParadigmConfig::new(ParadigmKind::ScoreOnlyBaseline, 1.0, 0.0),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            init_checkpoint: None,
            eval_modes: EvalMode::ALL.to_vec(),
            seed: 0,
            out_dir: None,
        }
    }
}

fn field_err(key: &str, value: &str, why: &str) -> Error {
    Error::invalid(format!("{key}: {why} (got {value:?})"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| field_err(key, value, "not a valid number"))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !v.is_finite() {
        return Err(field_err(key, value, "must be finite"));
    }
    Ok(v)
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(field_err(key, value, "expected true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `section.key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.data.path,
            &mut self.vocab_path,
            &mut self.init_checkpoint,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.paradigm.grpo;
        match key {
            "data.seed" => self.data.seed = num(key, value)?,
            "data.n" => self.data.n = num(key, value)?,
            "data.f" | "data.feature_dim" => self.data.generator.feature_dim = num(key, value)?,
            "data.projection_seed" => self.data.generator.projection_seed = num(key, value)?,
            "data.perturbation" => self.data.generator.perturbation = real(key, value)?,
            "data.train_fraction" => self.data.train_fraction = real(key, value)?,
            "data.path" => self.data.path = Some(PathBuf::from(value)),
            "vocab.path" => self.vocab_path = Some(PathBuf::from(value)),
            "paradigm.kind" => {
                self.paradigm.kind = value
                    .parse()
                    .map_err(|_| field_err(key, value, "unknown paradigm"))?
            }
            "paradigm.alpha" => self.paradigm.alpha = real(key, value)?,
            "paradigm.beta" => self.paradigm.beta = real(key, value)?,
            "grpo.clip" => g.clip = real(key, value)?,
            "grpo.kl_coeff" => g.kl_coeff = real(key, value)?,
            "grpo.group_size" => g.group_size = num(key, value)?,
            "grpo.scores_per_trace" => g.scores_per_trace = num(key, value)?,
            "grpo.learning_rate" => g.learning_rate = real(key, value)?,
            "grpo.inner_epochs" => g.inner_epochs = num(key, value)?,
            "grpo.std_floor" => g.std_floor = real(key, value)?,
            "grpo.kl_inside_min" => g.kl_inside_min = boolean(key, value)?,
            "rewards.tolerance" => self.paradigm.rewards.tolerance = real(key, value)?,
            "rewards.format_weight" => self.paradigm.rewards.format_weight = real(key, value)?,
            "train.iterations" => self.train.iterations = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.temperature" => self.train.temperature = real(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "train.init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "eval.modes" => {
                self.eval_modes =
                    parse_modes(value).map_err(|e| field_err(key, value, &e.to_string()))?
            }
            "run.seed" => self.seed = num(key, value)?,
            "run.out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n == 0 {
            return Err(Error::invalid("data.n must be at least 1"));
        }
        if self.data.generator.feature_dim == 0 {
            return Err(Error::invalid("data.f must be at least 1"));
        }
        if !(self.data.generator.perturbation >= 0.0) {
            return Err(Error::invalid("data.perturbation must be non-negative"));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::invalid("data.train_fraction must lie in (0,1)"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be at least 1"));
        }
        if !(self.train.temperature > 0.0) {
            return Err(Error::invalid("train.temperature must be positive"));
        }
        if self.paradigm.grpo.inner_epochs == 0 {
            return Err(Error::invalid("grpo.inner_epochs must be at least 1"));
        }
        self.paradigm.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let path = |p: &PathBuf| p.display().to_string();
        put("data.seed", self.data.seed.to_string());
        put("data.n", self.data.n.to_string());
        put("data.f", self.data.generator.feature_dim.to_string());
        put("data.projection_seed", self.data.generator.projection_seed.to_string());
        put("data.perturbation", self.data.generator.perturbation.to_string());
        put("data.train_fraction", self.data.train_fraction.to_string());
        if let Some(p) = &self.data.path {
            put("data.path", path(p));
        }
        if let Some(p) = &self.vocab_path {
            put("vocab.path", path(p));
        }
        let pc = &self.paradigm;
        put("paradigm.kind", pc.kind.to_string());
        put("paradigm.alpha", pc.alpha.to_string());
        put("paradigm.beta", pc.beta.to_string());
        put("grpo.clip", pc.grpo.clip.to_string());
        put("grpo.kl_coeff", pc.grpo.kl_coeff.to_string());
        put("grpo.group_size", pc.grpo.group_size.to_string());
        put("grpo.scores_per_trace", pc.grpo.scores_per_trace.to_string());
        put("grpo.learning_rate", pc.grpo.learning_rate.to_string());
        put("grpo.inner_epochs", pc.grpo.inner_epochs.to_string());
        put("grpo.std_floor", pc.grpo.std_floor.to_string());
        put("grpo.kl_inside_min", pc.grpo.kl_inside_min.to_string());
        put("rewards.tolerance", pc.rewards.tolerance.to_string());
        put("rewards.format_weight", pc.rewards.format_weight.to_string());
        put("train.iterations", self.train.iterations.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.temperature", self.train.temperature.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        if let Some(p) = &self.init_checkpoint {
            put("train.init_checkpoint", path(p));
        }
        let modes: Vec<&str> = self.eval_modes.iter().map(|m| m.name()).collect();
        put("eval.modes", modes.join(","));
        put("run.seed", self.seed.to_string());
        if let Some(p) = &self.out_dir {
            put("run.out_dir", path(p));
        }
        s
    }
}
