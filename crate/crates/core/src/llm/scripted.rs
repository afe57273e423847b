//! Fixture replay.
//!
//! A fixture is a line-delimited file of `{role, digest, response}` records.
//! Several records may share a `(role, digest)` key; they are served in file
//! order, wrapping around once exhausted, so repeated sampling of the same
//! prompt (evidence rounds) replays a fixed sequence.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{request_digest, LlmProvider, ProviderError, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub role: Role,
    pub digest: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    records: Vec<FixtureRecord>,
    strict: bool,
}

impl Fixture {
    pub fn new(records: Vec<FixtureRecord>, strict: bool) -> Self {
        Self { records, strict }
    }

    pub fn empty(strict: bool) -> Self {
        Self::new(Vec::new(), strict)
    }

    pub fn records(&self) -> &[FixtureRecord] {
        &self.records
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    /// Appends a response keyed by the exact prompt text.
    pub fn push(&mut self, role: Role, prompt: &str, response: impl Into<String>) {
        self.records.push(FixtureRecord {
            role,
            digest: request_digest(prompt),
            response: response.into(),
        });
    }

    pub fn from_reader(reader: impl BufRead, strict: bool) -> Result<Self, ProviderError> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| ProviderError::InvalidResponse(format!("fixture line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self::new(records, strict))
    }

    pub fn load(path: &Path, strict: bool) -> Result<Self, ProviderError> {
        let file = std::fs::File::open(path)
            .map_err(|e| ProviderError::InvalidResponse(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file), strict)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }
}

/// Response used for an unmapped request in non-strict mode.
pub(crate) fn default_response(role: Role, prompt: &str) -> String {
    match role {
        // no evidence
        Role::Evidence => "```json\n[]\n```".to_string(),
        // unparseable: triggers the fallback tree
        Role::Tree => String::new(),
        // unparseable: falls back to the equality rule
        Role::Discriminator => String::new(),
        Role::Verifier => "True".to_string(),
        // unparseable: falls back to question tokens
        Role::Keywords => String::new(),
        Role::Answer => prompt.to_string(),
        Role::Embed => String::new(),
    }
}

pub struct ScriptedProvider {
    index: HashMap<(Role, String), Vec<usize>>,
    records: Vec<FixtureRecord>,
    strict: bool,
    cursors: Mutex<HashMap<(Role, String), usize>>,
}

impl ScriptedProvider {
    pub fn new(fixture: Fixture) -> Self {
        let mut index: HashMap<(Role, String), Vec<usize>> = HashMap::new();
        for (i, r) in fixture.records.iter().enumerate() {
            index.entry((r.role, r.digest.clone())).or_default().push(i);
        }
        Self {
            index,
            records: fixture.records,
            strict: fixture.strict,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    /// Rewinds every replay cursor.
    pub fn reset(&self) {
        self.cursors.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

impl LlmProvider for ScriptedProvider {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        let key = (role, request_digest(prompt));
        match self.index.get(&key) {
            Some(slots) => {
                let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
                let cursor = cursors.entry(key).or_insert(0);
                let slot = slots[*cursor % slots.len()];
                *cursor += 1;
                Ok(self.records[slot].response.clone())
            }
            None if self.strict => Err(ProviderError::FixtureMiss { role, digest: key.1 }),
            None => Ok(default_response(role, prompt)),
        }
    }
}
