//! Run configuration, read from TOML. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{DEFAULT_ALPHA, DEFAULT_ROUNDS};
use crate::llm::{
    Embedder, Fixture, HashingEmbedder, HttpTransport, LlmProvider, ProviderConfig, ProviderError, RemoteEmbedder,
    RemoteProvider, ScriptedProvider,
};
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("cannot build HTTP client: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Model,
    #[default]
    RuleBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EqdConfig {
    pub rounds: usize,
    pub alpha: f64,
    pub discriminator: DiscriminatorKind,
}

impl Default for EqdConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            alpha: DEFAULT_ALPHA,
            discriminator: DiscriminatorKind::RuleBased,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EtdConfig {
    pub rollback: bool,
    pub verifier: bool,
}

impl Default for EtdConfig {
    fn default() -> Self {
        Self {
            rollback: true,
            verifier: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Replay file for the scripted provider.
    pub fixture: Option<PathBuf>,
    pub strict: bool,
    pub embedder: EmbedderKind,
    #[serde(flatten)]
    pub remote: ProviderConfig,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Scripted,
            fixture: None,
            strict: false,
            embedder: EmbedderKind::Hashing,
            remote: ProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Qa,
    Fact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSection {
    /// Questions evaluated concurrently.
    pub parallelism: usize,
    pub mode: EvalMode,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            parallelism: 1,
            mode: EvalMode::Qa,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub retrieval: RetrievalConfig,
    pub eqd: EqdConfig,
    pub etd: EtdConfig,
    pub provider: ProviderSection,
    pub pipeline: PipelineSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative fixture paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(f), Some(dir)) = (&cfg.provider.fixture, path.parent()) {
            if f.is_relative() {
                cfg.provider.fixture = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.eqd.rounds == 0 {
            return bad("eqd.rounds must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.eqd.alpha) {
            return bad("eqd.alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.retrieval.lambda) {
            return bad("retrieval.lambda must lie in [0, 1]");
        }
        if self.retrieval.k == 0 || self.retrieval.minhash_signatures == 0 {
            return bad("retrieval.k and retrieval.minhash_signatures must be positive");
        }
        if self.pipeline.parallelism == 0 {
            return bad("pipeline.parallelism must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_provider(&self) -> Result<Box<dyn LlmProvider>, ConfigError> {
        Ok(match self.provider.kind {
            ProviderKind::Scripted => {
                let fixture = match &self.provider.fixture {
                    Some(p) => Fixture::load(p, self.provider.strict)?,
                    None => Fixture::empty(self.provider.strict),
                };
                Box::new(ScriptedProvider::new(fixture))
            }
            ProviderKind::Remote => Box::new(
                RemoteProvider::http(self.provider.remote.clone())
                    .map_err(|e| ConfigError::Transport(e.to_string()))?,
            ),
        })
    }

    pub fn build_embedder(&self) -> Result<Box<dyn Embedder>, ConfigError> {
        Ok(match self.provider.embedder {
            EmbedderKind::Hashing => Box::new(HashingEmbedder),
            EmbedderKind::Remote => {
                let transport = HttpTransport::new().map_err(|e| ConfigError::Transport(e.to_string()))?;
                Box::new(RemoteEmbedder::new(self.provider.remote.clone(), transport))
            }
        })
    }
}
