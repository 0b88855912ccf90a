use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::model::{Modality, ModelConfig, TsEmbed};
use crate::utde::GateLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Binary,
    Multilabel(usize),
}

impl Task {
    pub fn n_labels(self) -> usize {
        match self {
            Task::Binary => 1,
            Task::Multilabel(l) => l,
        }
    }

    /// Name of the checkpoint-selection metric.
    pub fn selection_metric(self) -> &'static str {
        match self {
            Task::Binary => "f1",
            Task::Multilabel(_) => "macro_f1",
        }
    }
}

impl FromStr for Task {
    type Err = ConfigError;

    /// `binary` or `multilabel:<L>`.
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        if s == "binary" {
            return Ok(Task::Binary);
        }
        let l = s
            .strip_prefix("multilabel:")
            .and_then(|l| l.parse::<usize>().ok())
            .ok_or_else(|| ConfigError(format!("task must be binary or multilabel:<L>, got {s:?}")))?;
        if l < 2 {
            return Err(ConfigError("multilabel tasks need at least 2 labels".into()));
        }
        Ok(Task::Multilabel(l))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Binary => f.write_str("binary"),
            Task::Multilabel(l) => write!(f, "multilabel:{l}"),
        }
    }
}

/// Everything that determines a run. Read from a flat `key = value` file and
/// overridable key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    /// Grid points.
    pub alpha: usize,
    /// Prediction horizon in hours; observations at or after it are dropped.
    pub alpha_hours: f64,
    pub d_m: usize,
    pub d_t: usize,
    pub d_hidden: usize,
    pub d_timeembed: usize,
    pub n_time_embeds: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub gate_level: GateLevel,
    pub ts_embed: TsEmbed,
    pub modality: Modality,
    pub text_irregularity: bool,
    pub gate_override: Option<f64>,
    pub text_seed: u64,
    pub max_notes: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: Option<u64>,
    pub clip_norm: Option<f64>,
    pub pos_weight: f64,
    pub threshold: f64,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Binary,
            alpha: 48,
            alpha_hours: 48.0,
            d_m: 17,
            d_t: 768,
            d_hidden: 64,
            d_timeembed: 64,
            n_time_embeds: 8,
            fusion_layers: 3,
            heads: 4,
            conv_kernel: 1,
            gate_level: GateLevel::Hidden,
            ts_embed: TsEmbed::Utde,
            modality: Modality::Fused,
            text_irregularity: true,
            gate_override: None,
            text_seed: 0,
            max_notes: 5,
            batch_size: 32,
            lr: 4e-4,
            epochs: 20,
            seed: None,
            clip_norm: None,
            pos_weight: 1.0,
            threshold: 0.5,
            train_path: None,
            val_path: None,
            test_path: None,
            checkpoint_path: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn path_str(v: &Option<PathBuf>) -> String {
    v.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "alpha",
        "alpha_hours",
        "d_m",
        "d_t",
        "d_hidden",
        "d_timeembed",
        "n_time_embeds",
        "fusion_layers",
        "heads",
        "conv_kernel",
        "gate_level",
        "ts_embed",
        "modality",
        "text_irregularity",
        "gate_override",
        "text_seed",
        "max_notes",
        "batch_size",
        "lr",
        "epochs",
        "seed",
        "clip_norm",
        "pos_weight",
        "threshold",
        "train_path",
        "val_path",
        "test_path",
        "checkpoint_path",
    ];

    /// Sets one key; hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "task" => self.task = v.parse()?,
            "alpha" => self.alpha = parse(k, v)?,
            "alpha_hours" => self.alpha_hours = parse(k, v)?,
            "d_m" => self.d_m = parse(k, v)?,
            "d_t" => self.d_t = parse(k, v)?,
            "d_hidden" => self.d_hidden = parse(k, v)?,
            "d_timeembed" => self.d_timeembed = parse(k, v)?,
            "n_time_embeds" => self.n_time_embeds = parse(k, v)?,
            "fusion_layers" => self.fusion_layers = parse(k, v)?,
            "heads" => self.heads = parse(k, v)?,
            "conv_kernel" => self.conv_kernel = parse(k, v)?,
            "gate_level" => self.gate_level = v.parse()?,
            "ts_embed" => self.ts_embed = v.parse()?,
            "modality" => self.modality = v.parse()?,
            "text_irregularity" => self.text_irregularity = parse(k, v)?,
            "gate_override" => self.gate_override = parse_opt(k, v)?,
            "text_seed" => self.text_seed = parse(k, v)?,
            "max_notes" => self.max_notes = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "seed" => self.seed = parse_opt(k, v)?,
            "clip_norm" => self.clip_norm = parse_opt(k, v)?,
            "pos_weight" => self.pos_weight = parse(k, v)?,
            "threshold" => self.threshold = parse(k, v)?,
            "train_path" => self.train_path = parse_opt(k, v)?,
            "val_path" => self.val_path = parse_opt(k, v)?,
            "test_path" => self.test_path = parse_opt(k, v)?,
            "checkpoint_path" => self.checkpoint_path = parse_opt(k, v)?,
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse_kv(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "task" => self.task.to_string(),
            "alpha" => self.alpha.to_string(),
            "alpha_hours" => format!("{:?}", self.alpha_hours),
            "d_m" => self.d_m.to_string(),
            "d_t" => self.d_t.to_string(),
            "d_hidden" => self.d_hidden.to_string(),
            "d_timeembed" => self.d_timeembed.to_string(),
            "n_time_embeds" => self.n_time_embeds.to_string(),
            "fusion_layers" => self.fusion_layers.to_string(),
            "heads" => self.heads.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "gate_level" => self.gate_level.to_string(),
            "ts_embed" => self.ts_embed.to_string(),
            "modality" => self.modality.to_string(),
            "text_irregularity" => self.text_irregularity.to_string(),
            "gate_override" => opt_str(&self.gate_override.map(|g| format!("{g:?}"))),
            "text_seed" => self.text_seed.to_string(),
            "max_notes" => self.max_notes.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => format!("{:?}", self.lr),
            "epochs" => self.epochs.to_string(),
            "seed" => opt_str(&self.seed),
            "clip_norm" => opt_str(&self.clip_norm.map(|c| format!("{c:?}"))),
            "pos_weight" => format!("{:?}", self.pos_weight),
            "threshold" => format!("{:?}", self.threshold),
            "train_path" => path_str(&self.train_path),
            "val_path" => path_str(&self.val_path),
            "test_path" => path_str(&self.test_path),
            "checkpoint_path" => path_str(&self.checkpoint_path),
            _ => return None,
        })
    }

    /// Inverse of [`RunConfig::parse_kv`].
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_m: self.d_m,
            d_t: self.d_t,
            alpha: self.alpha,
            d_hidden: self.d_hidden,
            d_timeembed: self.d_timeembed,
            n_time_embeds: self.n_time_embeds,
            fusion_layers: self.fusion_layers,
            heads: self.heads,
            conv_kernel: self.conv_kernel,
            n_outputs: self.task.n_labels(),
            gate_level: self.gate_level,
            ts_embed: self.ts_embed,
            modality: self.modality,
            text_irregularity: self.text_irregularity,
            gate_override: self.gate_override,
            text_seed: self.text_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config().validate()?;
        if self.d_t < 8 {
            return Err(ConfigError("d_t must be >= 8".into()));
        }
        if !(self.alpha_hours > 0.0) {
            return Err(ConfigError("alpha_hours must be positive".into()));
        }
        if self.batch_size == 0 || self.max_notes == 0 {
            return Err(ConfigError("batch_size and max_notes must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.pos_weight > 0.0) {
            return Err(ConfigError("lr and pos_weight must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(ConfigError("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.seed
            .ok_or_else(|| ConfigError("a seed is required for training (--seed)".into()))
    }
}
