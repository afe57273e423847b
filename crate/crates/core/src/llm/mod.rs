//! Model roles and the provider contract.
//!
//! Every model call in the pipeline goes through [`LlmProvider::complete`]
//! with a [`Role`]. Two implementations exist: [`RemoteProvider`] talks to a
//! chat-completion endpoint, [`ScriptedProvider`] replays a fixture file.

mod embed;
mod remote;
mod roles;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use embed::{cosine, Embedder, EmbedderError, HashingEmbedder, RemoteEmbedder, HASHING_DIM};
pub use remote::{HttpTransport, RemoteProvider, Transport, TransportError};
pub use roles::{
    discriminate, extract_json_block, parse_verifier_reply, rule_equivalent, verify_table, ConditionEquivalence,
    ModelDiscriminator, RuleBasedDiscriminator,
};
pub use scripted::{Fixture, FixtureRecord, ScriptedProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Evidence,
    Tree,
    Discriminator,
    Verifier,
    Keywords,
    Answer,
    Embed,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Evidence,
        Role::Tree,
        Role::Discriminator,
        Role::Verifier,
        Role::Keywords,
        Role::Answer,
        Role::Embed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Evidence => "evidence",
            Role::Tree => "tree",
            Role::Discriminator => "discriminator",
            Role::Verifier => "verifier",
            Role::Keywords => "keywords",
            Role::Answer => "answer",
            Role::Embed => "embed",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transport failure for role {role}: {message}")]
    Transport { role: Role, message: String },
    #[error("no fixture response for role {role}, digest {digest}")]
    FixtureMiss { role: Role, digest: String },
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for &P {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(role, prompt)
    }
}

impl<P: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<P> {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(role, prompt)
    }
}

/// Fixture digest of a request: SHA-256 of the exact prompt bytes.
pub fn request_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Per-role model identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleModels {
    pub evidence: String,
    pub tree: String,
    pub discriminator: String,
    pub verifier: String,
    pub keywords: String,
    pub answer: String,
    pub embed: String,
}

impl Default for RoleModels {
    fn default() -> Self {
        Self {
            evidence: "gpt-4o-mini".into(),
            tree: "gpt-4o-mini".into(),
            discriminator: "llama-2-7b-chat".into(),
            verifier: "gpt-4o-mini".into(),
            keywords: "gpt-4o-mini".into(),
            answer: "gpt-4o-mini".into(),
            embed: "bge-large-en-v1.5".into(),
        }
    }
}

impl RoleModels {
    pub fn get(&self, role: Role) -> &str {
        match role {
            Role::Evidence => &self.evidence,
            Role::Tree => &self.tree,
            Role::Discriminator => &self.discriminator,
            Role::Verifier => &self.verifier,
            Role::Keywords => &self.keywords,
            Role::Answer => &self.answer,
            Role::Embed => &self.embed,
        }
    }
}

/// Sampling temperature per role. Evidence generation samples so repeated
/// rounds differ; everything else decodes greedily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleTemperatures {
    pub evidence: f64,
    pub tree: f64,
    pub discriminator: f64,
    pub verifier: f64,
    pub keywords: f64,
    pub answer: f64,
}

impl Default for RoleTemperatures {
    fn default() -> Self {
        Self {
            evidence: 0.7,
            tree: 0.0,
            discriminator: 0.0,
            verifier: 0.0,
            keywords: 0.0,
            answer: 0.0,
        }
    }
}

impl RoleTemperatures {
    pub fn get(&self, role: Role) -> f64 {
        match role {
            Role::Evidence => self.evidence,
            Role::Tree => self.tree,
            Role::Discriminator => self.discriminator,
            Role::Verifier => self.verifier,
            Role::Keywords => self.keywords,
            Role::Answer => self.answer,
            Role::Embed => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub chat_path: String,
    pub embed_path: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Base delay for exponential backoff between retries.
    pub backoff_ms: u64,
    pub models: RoleModels,
    pub temperatures: RoleTemperatures,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com".into(),
            chat_path: "/v1/chat/completions".into(),
            embed_path: "/v1/embeddings".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            timeout_secs: 60,
            backoff_ms: 500,
            models: RoleModels::default(),
            temperatures: RoleTemperatures::default(),
        }
    }
}

/// Counts calls per role.
pub struct CountingProvider<P> {
    inner: P,
    counts: [AtomicUsize; 7],
}

impl<P: LlmProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            counts: Default::default(),
        }
    }

    pub fn count(&self, role: Role) -> usize {
        self.counts[role.index()].load(Ordering::Relaxed)
    }

    pub fn counts(&self) -> std::collections::BTreeMap<Role, usize> {
        Role::ALL
            .into_iter()
            .map(|r| (r, self.count(r)))
            .filter(|(_, c)| *c > 0)
            .collect()
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: LlmProvider> LlmProvider for CountingProvider<P> {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        self.counts[role.index()].fetch_add(1, Ordering::Relaxed);
        self.inner.complete(role, prompt)
    }
}

/// Records every successful call so a live session can be turned into a
/// replay fixture.
pub struct RecordingProvider<P> {
    inner: P,
    records: Mutex<Vec<FixtureRecord>>,
}

impl<P: LlmProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn into_fixture(self, strict: bool) -> Fixture {
        Fixture::new(self.records.into_inner().unwrap_or_else(|e| e.into_inner()), strict)
    }
}

impl<P: LlmProvider> LlmProvider for RecordingProvider<P> {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        let response = self.inner.complete(role, prompt)?;
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(FixtureRecord {
                role,
                digest: request_digest(prompt),
                response: response.clone(),
            });
        Ok(response)
    }
}

/// Adapter turning a closure into a provider. Handy for tests and for
/// generating fixtures from hand-written rules.
pub struct FnProvider<F>(pub F);

impl<F> LlmProvider for FnProvider<F>
where
    F: Fn(Role, &str) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        (self.0)(role, prompt)
    }
}
