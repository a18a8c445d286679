//! Run configuration. Settings are flat `key = value` pairs layered as
//! config file, then command-line flags, then `ROS_<KEY>` environment
//! variables, each layer overriding the previous one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::BUILTIN_ORDERS;
use crate::distill::DEFAULT_MAX_CONTEXT_CHARS;
use crate::embed::Metric;
use crate::error::{Error, Result};
use crate::perturb::PerturbCounts;
use crate::prompt::DEFAULT_TURN_THRESHOLD;
use crate::quandary::DEFAULT_MIN_TURN;
use crate::select::{PositiveAnchor, SelectionConfig};
use crate::teacher::{GenerationParams, SamplingMode};

pub const DEFAULT_CONFIG_FILE: &str = "ros.toml";
pub const DEFAULT_MEMORY_SIZE: usize = 50;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Precomputed vectors keyed by text hash.
    #[default]
    File,
    Http,
    /// Local feature hashing, for smoke tests only.
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub generation: GenerationParams,
    pub selection: SelectionConfig,
    pub perturb: PerturbCounts,
    pub seed: u64,
    pub task_order: String,
    pub memory_size: usize,
    pub turn_threshold: usize,
    pub min_turn: usize,
    pub parallelism: usize,
    pub max_context_chars: usize,
    pub cache_dir: PathBuf,
    pub provider: ProviderKind,
    pub teacher_url: Option<String>,
    #[serde(skip)]
    pub teacher_key: Option<String>,
    pub teacher_model: String,
    pub mock_template: String,
    pub embedding: EmbeddingKind,
    pub embeddings_path: Option<PathBuf>,
    pub embedding_url: Option<String>,
    #[serde(skip)]
    pub embedding_key: Option<String>,
    pub embedding_model: String,
    pub embedding_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generation: GenerationParams::default(),
            selection: SelectionConfig::default(),
            perturb: PerturbCounts::default(),
            seed: DEFAULT_SEED,
            task_order: "order1".into(),
            memory_size: DEFAULT_MEMORY_SIZE,
            turn_threshold: DEFAULT_TURN_THRESHOLD,
            min_turn: DEFAULT_MIN_TURN,
            parallelism: 4,
            max_context_chars: DEFAULT_MAX_CONTEXT_CHARS,
            cache_dir: PathBuf::from(".ros-cache"),
            provider: ProviderKind::Mock,
            teacher_url: None,
            teacher_key: None,
            teacher_model: "gpt-3.5-turbo".into(),
            mock_template: "Candidate reasoning {i} for prompt {hash}.".into(),
            embedding: EmbeddingKind::File,
            embeddings_path: None,
            embedding_url: None,
            embedding_key: None,
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: 256,
        }
    }
}

/// Every settable key, in documentation order.
pub const KEYS: &[&str] = &[
    "temperature",
    "g",
    "max_tokens",
    "sampling",
    "tau",
    "metric",
    "anchor",
    "n_value",
    "n_slot",
    "seed",
    "task_order",
    "memory_size",
    "turn_threshold",
    "min_turn",
    "parallelism",
    "max_context_chars",
    "cache_dir",
    "provider",
    "teacher_url",
    "teacher_key",
    "teacher_model",
    "mock_template",
    "embedding",
    "embeddings_path",
    "embedding_url",
    "embedding_key",
    "embedding_model",
    "embedding_dim",
];

/// Environment variable consulted for `key`.
pub fn env_var(key: &str) -> String {
    format!("ROS_{}", key.to_ascii_uppercase())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn non_empty(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "temperature" => self.generation.temperature = parse(key, value)?,
            "g" => {
                let g: usize = parse(key, value)?;
                self.generation.n_samples = g;
                self.selection.g = g;
            }
            "max_tokens" => self.generation.max_new_tokens = parse(key, value)?,
            "sampling" => {
                self.generation.sampling = match value.trim() {
                    "n" | "n-sampling" | "n_sampling" => SamplingMode::NSampling,
                    "independent" => SamplingMode::Independent,
                    other => return Err(format!("sampling: expected n or independent, got {other:?}")),
                }
            }
            "tau" => self.selection.tau = parse(key, value)?,
            "metric" => self.selection.metric = parse::<Metric>(key, value)?,
            "anchor" => self.selection.anchor = parse::<PositiveAnchor>(key, value)?,
            "n_value" => self.perturb.n_value = parse(key, value)?,
            "n_slot" => self.perturb.n_slot = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "task_order" => self.task_order = value.trim().to_string(),
            "memory_size" => self.memory_size = parse(key, value)?,
            "turn_threshold" => self.turn_threshold = parse(key, value)?,
            "min_turn" => self.min_turn = parse(key, value)?,
            "parallelism" => self.parallelism = parse(key, value)?,
            "max_context_chars" => self.max_context_chars = parse(key, value)?,
            "cache_dir" => self.cache_dir = PathBuf::from(value.trim()),
            "provider" => {
                self.provider = match value.trim() {
                    "mock" => ProviderKind::Mock,
                    "http" => ProviderKind::Http,
                    other => return Err(format!("provider: expected mock or http, got {other:?}")),
                }
            }
            "teacher_url" => self.teacher_url = non_empty(value),
            "teacher_key" => self.teacher_key = non_empty(value),
            "teacher_model" => self.teacher_model = value.trim().to_string(),
            "mock_template" => self.mock_template = value.to_string(),
            "embedding" => {
                self.embedding = match value.trim() {
                    "file" => EmbeddingKind::File,
                    "http" => EmbeddingKind::Http,
                    "hashing" => EmbeddingKind::Hashing,
                    other => {
                        return Err(format!("embedding: expected file, http or hashing, got {other:?}"))
                    }
                }
            }
            "embeddings_path" => self.embeddings_path = non_empty(value).map(PathBuf::from),
            "embedding_url" => self.embedding_url = non_empty(value),
            "embedding_key" => self.embedding_key = non_empty(value),
            "embedding_model" => self.embedding_model = value.trim().to_string(),
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            other => return Err(format!("unknown setting {other:?}")),
        }
        Ok(())
    }

    /// Negatives per query, `n_value + n_slot`.
    pub fn n(&self) -> usize {
        self.perturb.total()
    }

    /// Checks cross-field invariants; every violation is reported.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if let Err(e) = self.generation.validate() {
            errs.extend(e);
        }
        if !(self.selection.tau > 0.0 && self.selection.tau.is_finite()) {
            errs.push(format!("tau must be > 0, got {}", self.selection.tau));
        }
        if self.n() == 0 {
            errs.push("n_value + n_slot must be >= 1".into());
        }
        if self.parallelism == 0 {
            errs.push("parallelism must be >= 1".into());
        }
        if self.max_context_chars == 0 {
            errs.push("max_context_chars must be >= 1".into());
        }
        if self.embedding == EmbeddingKind::Hashing && self.embedding_dim == 0 {
            errs.push("embedding_dim must be >= 1".into());
        }
        if self.provider == ProviderKind::Http && self.teacher_url.is_none() {
            errs.push(format!(
                "provider http needs a teacher URL ({} or --teacher-url)",
                env_var("teacher_url")
            ));
        }
        if self.embedding == EmbeddingKind::Http && self.embedding_url.is_none() {
            errs.push(format!(
                "embedding http needs an endpoint URL ({} or --embedding-url)",
                env_var("embedding_url")
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Builds a configuration from defaults, then the file, then `flags`,
    /// then the environment. Parse and validation errors are collected and
    /// returned together.
    pub fn resolve(
        file: Option<&Path>,
        flags: &[(String, String)],
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        if let Some(path) = file {
            match read_file_layer(path) {
                Ok(pairs) => {
                    for (k, v) in pairs {
                        if let Err(e) = cfg.set(&k, &v) {
                            errs.push(format!("{}: {e}", path.display()));
                        }
                    }
                }
                Err(e) => errs.push(e),
            }
        }
        for (k, v) in flags {
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("flag: {e}"));
            }
        }
        for key in KEYS {
            let var = env_var(key);
            if let Some(v) = env(&var) {
                if let Err(e) = cfg.set(key, &v) {
                    errs.push(format!("{var}: {e}"));
                }
            }
        }
        cfg.selection.g = cfg.generation.n_samples;
        cfg.selection.n = cfg.n();
        if let Err(e) = cfg.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn manifest(&self) -> ConfigManifest {
        ConfigManifest {
            temperature: self.generation.temperature,
            g: self.generation.n_samples,
            max_tokens: self.generation.max_new_tokens,
            sampling: self.generation.sampling,
            n: self.n(),
            n_value: self.perturb.n_value,
            n_slot: self.perturb.n_slot,
            tau: self.selection.tau,
            metric: self.selection.metric,
            anchor: self.selection.anchor,
            memory_size: self.memory_size,
            turn_threshold: self.turn_threshold,
            seed: self.seed,
            task_order: self.task_order.clone(),
            task_orders: BUILTIN_ORDERS
                .iter()
                .map(|(name, ids)| (name.to_string(), ids.to_vec()))
                .collect(),
        }
    }
}

/// Reads a flat TOML table. Scalar values only.
fn read_file_layer(path: &Path) -> std::result::Result<Vec<(String, String)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (k, v) in table {
        let value = match v {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(format!(
                    "{}: {k}: expected a scalar, got {}",
                    path.display(),
                    other.type_str()
                ))
            }
        };
        out.push((k, value));
    }
    Ok(out)
}

/// Effective settings written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigManifest {
    pub temperature: f64,
    pub g: usize,
    pub max_tokens: u32,
    pub sampling: SamplingMode,
    pub n: usize,
    pub n_value: usize,
    pub n_slot: usize,
    pub tau: f64,
    pub metric: Metric,
    pub anchor: PositiveAnchor,
    pub memory_size: usize,
    pub turn_threshold: usize,
    pub seed: u64,
    pub task_order: String,
    pub task_orders: BTreeMap<String, Vec<u32>>,
}
