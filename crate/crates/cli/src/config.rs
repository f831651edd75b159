//! Key-value run configuration.
//!
//! The config file is flat `key = value` lines; `#` starts a comment. Keys
//! are namespaced with dots (`dataset.size = 64`). Unknown keys are
//! validation errors so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use flowsr_core::autodiff::ModelKind;
use flowsr_core::codec::LatentUpsample;
use flowsr_core::solvers::{SolverConfig, SolverMethod};

#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(message: impl Into<String>) -> ConfigError {
    ConfigError {
        message: message.into(),
    }
}

/// Every key the schema understands; anything else is a validation error.
pub const KNOWN_KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.seed",
    "dataset.n",
    "dataset.size",
    "dataset.factor",
    "codec.seed",
    "codec.patch",
    "model.kind",
    "arch.base_channels",
    "arch.channel_mults",
    "arch.blocks_per_level",
    "arch.attn_bottom",
    "arch.time_embed_dim",
    "arch.norm_groups",
    "path.sigma_min",
    "path.t_aug",
    "path.schedule_steps",
    "path.upsample",
    "path.t_aug_randomize",
    "solver.method",
    "solver.steps",
    "solver.rtol",
    "solver.atol",
    "solver.h_init",
    "solver.h_min",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.seed",
    "train.log_every",
    "train.checkpoint_every",
    "train.data",
    "train.resume",
    "sample.prior",
    "sample.upsampler",
    "sample.count",
    "sample.ddim_steps",
    "sample.seed",
    "sample.prior_size",
    "sample.times",
    "eval.checkpoint",
    "eval.data",
    "eval.n",
    "eval.seed",
    "eval.ddim_steps",
    "eval.patch",
    "eval.patches_per_image",
    "ablate.axis",
    "ablate.values",
    "ablate.checkpoint",
    "out.dir",
];

/// Parsed key-value file, validated against [`KNOWN_KEYS`].
pub struct FileConfig {
    values: BTreeMap<String, (String, usize)>,
}

impl FileConfig {
    pub fn empty() -> Self {
        Self {
            values: BTreeMap::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(err(format!("line {}: empty key", lineno + 1)));
            }
            if values
                .insert(key.clone(), (value, lineno + 1))
                .is_some()
            {
                return Err(err(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        for (key, (_, line)) in &values {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(err(format!("line {line}: unknown key {key}")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "getter for unlisted key {key}");
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn str_req(&self, key: &str) -> Result<String, ConfigError> {
        self.raw(key)
            .map(str::to_string)
            .ok_or_else(|| err(format!("missing required key {key}")))
    }

    pub fn opt_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        v.parse()
            .map_err(|e| err(format!("key {key}: cannot parse {v:?}: {e}")))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let v = v.to_string();
                self.parse_as(key, &v)
            }
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn u32_or(&self, key: &str, default: u32) -> Result<u32, ConfigError> {
        Ok(self.u64_or(key, default as u64)? as u32)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let v = v.to_string();
                self.parse_as(key, &v)
            }
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(err(format!("key {key}: expected true/false, got {v:?}"))),
        }
    }

    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>, ConfigError> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| err(format!("key {key}: bad list entry {s:?}: {e}")))
                })
                .collect(),
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| err(format!("key {key}: bad list entry {s:?}: {e}")))
                })
                .collect(),
        }
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Texture,
    Bimodal,
    Toy2d,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "texture" => Ok(Self::Texture),
            "bimodal" => Ok(Self::Bimodal),
            "toy2d" => Ok(Self::Toy2d),
            _ => Err(err(format!(
                "dataset.kind: expected texture|bimodal|toy2d, got {s:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Texture => "texture",
            Self::Bimodal => "bimodal",
            Self::Toy2d => "toy2d",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    pub factor: usize,
}

#[derive(Debug, Clone)]
pub struct CodecSpec {
    pub seed: u64,
    pub patch: usize,
}

pub fn dataset_spec(cfg: &FileConfig) -> Result<DatasetSpec, ConfigError> {
    Ok(DatasetSpec {
        kind: DatasetKind::parse(&cfg.str_or("dataset.kind", "texture"))?,
        seed: cfg.u64_or("dataset.seed", 7)?,
        n: cfg.usize_or("dataset.n", 128)?,
        size: cfg.usize_or("dataset.size", 64)?,
        factor: cfg.usize_or("dataset.factor", 4)?,
    })
}

pub fn codec_spec(cfg: &FileConfig) -> Result<CodecSpec, ConfigError> {
    Ok(CodecSpec {
        seed: cfg.u64_or("codec.seed", 17)?,
        patch: cfg.usize_or("codec.patch", 2)?,
    })
}

pub fn model_kind(cfg: &FileConfig) -> Result<ModelKind, ConfigError> {
    let s = cfg.str_or("model.kind", "cfm");
    ModelKind::parse(&s).ok_or_else(|| {
        err(format!(
            "model.kind: expected cfm|fm_naive|dm_upsampler|ddpm_prior|reg_l1|reg_l2, got {s:?}"
        ))
    })
}

pub struct ArchOverrides {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub attn_bottom: bool,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

pub fn arch_overrides(cfg: &FileConfig) -> Result<ArchOverrides, ConfigError> {
    Ok(ArchOverrides {
        base_channels: cfg.usize_or("arch.base_channels", 32)?,
        channel_mults: cfg.usize_list_or("arch.channel_mults", &[1, 2, 4])?,
        blocks_per_level: cfg.usize_or("arch.blocks_per_level", 2)?,
        attn_bottom: cfg.bool_or("arch.attn_bottom", true)?,
        time_embed_dim: cfg.usize_or("arch.time_embed_dim", 128)?,
        norm_groups: cfg.usize_or("arch.norm_groups", 8)?,
    })
}

pub struct PathSpec {
    pub sigma_min: f64,
    pub t_aug: u32,
    pub t_aug_randomize: bool,
    pub schedule_steps: u32,
    pub upsample: LatentUpsample,
}

pub fn path_spec(cfg: &FileConfig) -> Result<PathSpec, ConfigError> {
    let method = cfg.str_or("path.upsample", "psu");
    Ok(PathSpec {
        sigma_min: cfg.f64_or("path.sigma_min", 1e-4)?,
        t_aug: cfg.u32_or("path.t_aug", 400)?,
        t_aug_randomize: cfg.bool_or("path.t_aug_randomize", false)?,
        schedule_steps: cfg.u32_or("path.schedule_steps", 1000)?,
        upsample: LatentUpsample::parse(&method)
            .ok_or_else(|| err(format!("path.upsample: expected psu|bilinear|nearest, got {method:?}")))?,
    })
}

pub fn solver_spec(cfg: &FileConfig) -> Result<SolverConfig, ConfigError> {
    let method_s = cfg.str_or("solver.method", "euler");
    let method = SolverMethod::parse(&method_s).ok_or_else(|| {
        err(format!(
            "solver.method: expected euler|midpoint|rk4|dopri5, got {method_s:?}"
        ))
    })?;
    let mut solver = match method {
        SolverMethod::Dopri5 => {
            SolverConfig::dopri5(cfg.f64_or("solver.rtol", 1e-5)?, cfg.f64_or("solver.atol", 1e-5)?)
        }
        m => {
            let steps = cfg.usize_or("solver.steps", 50)?;
            // Consume tolerance keys so they are legal in shared files.
            let _ = cfg.f64_or("solver.rtol", 1e-5)?;
            let _ = cfg.f64_or("solver.atol", 1e-5)?;
            SolverConfig::fixed(m, steps)
        }
    };
    if method == SolverMethod::Dopri5 {
        let _ = cfg.usize_or("solver.steps", 50)?;
    }
    solver.h_init = cfg.f64_or("solver.h_init", 0.05)?;
    solver.h_min = cfg.f64_or("solver.h_min", 1e-10)?;
    Ok(solver)
}

pub struct TrainSpec {
    pub steps: u32,
    pub batch: u32,
    pub lr: f64,
    pub seed: u64,
    pub log_every: u32,
    pub checkpoint_every: u32,
    pub data_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn train_spec(cfg: &FileConfig, dataset_seed: u64) -> Result<TrainSpec, ConfigError> {
    Ok(TrainSpec {
        steps: cfg.u32_or("train.steps", 500)?,
        batch: cfg.u32_or("train.batch", 4)?,
        lr: cfg.f64_or("train.lr", 5e-5)?,
        seed: cfg.u64_or("train.seed", dataset_seed)?,
        log_every: cfg.u32_or("train.log_every", 10)?,
        checkpoint_every: cfg.u32_or("train.checkpoint_every", 0)?,
        data_dir: cfg.opt_str("train.data").map(PathBuf::from),
        resume: cfg.opt_str("train.resume").map(PathBuf::from),
    })
}
