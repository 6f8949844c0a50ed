//! Run configuration: one TOML document with a table per pipeline stage.
//!
//! Resolution order for the config path: an explicit `--config` flag, then
//! the `FEDTOX_CONFIG` environment variable, then `./fedtox.toml`, then
//! built-in defaults. An explicitly named file that does not exist is an
//! error; a missing `./fedtox.toml` silently falls back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::deepwalk::DeepWalkParams;
use crate::features::FeatureOptions;
use crate::federation::FederationConfig;
use crate::labeling::ModerationPolicy;
use crate::llm::{EndpointConfig, LlmRunConfig};
use crate::synth::SynthConfig;

pub const CONFIG_ENV: &str = "FEDTOX_CONFIG";
pub const DEFAULT_CONFIG_PATH: &str = "fedtox.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Corpus ingestion filters applied before labeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Input corpus path; when absent the synth stage output under
    /// `out_dir` is used.
    pub input: Option<PathBuf>,
    pub min_posts: usize,
    pub allowed_langs: Vec<String>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            input: None,
            min_posts: 5,
            allowed_langs: vec!["en".to_owned()],
        }
    }
}

impl IngestConfig {
    pub fn lang_set(&self) -> BTreeSet<String> {
        self.allowed_langs.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// One-sided significance threshold for edge retention.
    pub delta: f64,
    /// Also write per-edge score columns next to the backbone graphs.
    pub write_scores: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            delta: 1.64,
            write_scores: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub deepwalk: DeepWalkParams,
    pub options: FeatureOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: EndpointConfig,
    pub run: LlmRunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Seeds averaged per grid cell.
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub labeling: ModerationPolicy,
    pub backbone: BackboneConfig,
    pub features: FeaturesConfig,
    pub federation: FederationConfig,
    pub llm: LlmConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            labeling: ModerationPolicy::default(),
            backbone: BackboneConfig::default(),
            features: FeaturesConfig::default(),
            federation: FederationConfig::default(),
            llm: LlmConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl RunConfig {
    /// Validates every stage's parameters before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| ConfigError::Invalid(msg);
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("out_dir must not be empty".to_owned()));
        }
        self.synth
            .validate()
            .map_err(|e| invalid(format!("synth: {e}")))?;
        if self.ingest.allowed_langs.is_empty() {
            return Err(invalid(
                "ingest.allowed_langs must list at least one language".to_owned(),
            ));
        }
        self.labeling
            .validate()
            .map_err(|e| invalid(format!("labeling: {e}")))?;
        if !self.backbone.delta.is_finite() || self.backbone.delta < 0.0 {
            return Err(invalid(format!(
                "backbone.delta must be finite and nonnegative, got {}",
                self.backbone.delta
            )));
        }
        let dw = &self.features.deepwalk;
        if dw.dims == 0 || dw.n_walks == 0 || dw.walk_len < 2 || dw.window == 0 || dw.epochs == 0 {
            return Err(invalid(
                "features.deepwalk needs dims, n_walks, window, epochs >= 1 and walk_len >= 2"
                    .to_owned(),
            ));
        }
        let t = &self.features.options.toggles;
        if !(t.embeddings || t.user_block || t.sentiment || t.statistics) {
            return Err(invalid(
                "features.options.toggles must enable at least one block".to_owned(),
            ));
        }
        self.federation
            .validate()
            .map_err(|e| invalid(format!("federation: {e}")))?;
        self.llm
            .endpoint
            .validate()
            .map_err(|e| invalid(format!("llm.endpoint: {e}")))?;
        let run = &self.llm.run;
        if run.fewshot_per_class == 0
            || run.local_test_per_class == 0
            || run.global_test_per_class == 0
            || run.instances_per_seed == 0
        {
            return Err(invalid("llm.run sizes must all be at least 1".to_owned()));
        }
        if run.seeds.is_empty() {
            return Err(invalid("llm.run.seeds must not be empty".to_owned()));
        }
        if run.text_budget < 16 {
            return Err(invalid(format!(
                "llm.run.text_budget of {} leaves no room for any conversation",
                run.text_budget
            )));
        }
        if self.grid.seeds.is_empty() {
            return Err(invalid("grid.seeds must not be empty".to_owned()));
        }
        Ok(())
    }

    /// Stable content hash used to tie stage outputs to the config that
    /// produced them.
    pub fn config_hash(&self) -> String {
        let encoded = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(encoded.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Loads the run config, resolving the path as documented on this module.
/// `explicit` is the `--config` flag value when given.
pub fn load_config(explicit: Option<&Path>) -> Result<RunConfig, ConfigError> {
    if let Some(path) = explicit {
        return parse_config(path);
    }
    if let Some(path) = std::env::var_os(CONFIG_ENV) {
        return parse_config(Path::new(&path));
    }
    let default = Path::new(DEFAULT_CONFIG_PATH);
    if default.exists() {
        return parse_config(default);
    }
    Ok(RunConfig::default())
}
