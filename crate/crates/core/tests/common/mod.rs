//! Shared helpers for integration tests: the bundled demo fixture and the
//! rule-based oracle that produced it.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use enotab_core::config::Config;
use enotab_core::llm::{Fixture, HashingEmbedder, LlmProvider, ProviderError, RecordingProvider, Role};
use enotab_core::pipeline::{load_dataset, Pipeline};

pub fn demo_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo")
}

pub fn demo_config() -> Config {
    Config::load(&demo_dir().join("config.toml")).unwrap()
}

pub const DEMO_QUESTION: &str = "how many cities in Tel Aviv, updated in 2018";

/// Deterministic stand-in for the model roles on the demo questions.
/// Answers are read off the table in the answer prompt.
#[derive(Default)]
pub struct DemoOracle {
    rounds: Mutex<HashMap<String, usize>>,
}

fn ev(area: &str, condition: &str, action: &str) -> String {
    format!(r#"{{"area":"{area}","condition":"{condition}","action":"{action}"}}"#)
}

fn question_of(prompt: &str) -> String {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or_default()
        .to_string()
}

fn answer_from_table(prompt: &str) -> String {
    let body: Vec<&str> = prompt
        .split_once("Table:\n")
        .map(|(_, rest)| rest.lines().take_while(|l| !l.is_empty()).skip(1).collect())
        .unwrap_or_default();
    if question_of(prompt).starts_with("how many") {
        return body.len().to_string();
    }
    body.iter()
        .map(|l| l.split(" | ").next().unwrap_or_default())
        .collect::<Vec<_>>()
        .join("|")
}

impl LlmProvider for DemoOracle {
    fn complete(&self, role: Role, prompt: &str) -> Result<String, ProviderError> {
        let q = question_of(prompt);
        let district = ev("District", "Tel Aviv", "string_match");
        let population = ev("Population", "> 200000", "numeric_compare");
        let founded = ev("Founded", "before 1900", "date_eval");
        Ok(match role {
            Role::Evidence => {
                let mut rounds = self.rounds.lock().unwrap();
                let n = rounds.entry(q.clone()).or_insert(0);
                *n += 1;
                let items = if q.contains("updated in 2018") {
                    // one round phrases the same unit differently
                    let d = if *n == 3 {
                        ev("District", "in Tel Aviv", "string_match")
                    } else {
                        district
                    };
                    vec![d, ev("Updated", "2018", "date_eval")]
                } else if q.contains("founded before 1900") {
                    vec![founded, ev("Cycle", "4", "numeric_compare")]
                } else {
                    vec![district, population]
                };
                format!("```json\n[{}]\n```", items.join(", "))
            }
            Role::Tree => {
                let tree = if q.contains("updated in 2018") {
                    format!(r#"{{"leaf":{district}}}"#)
                } else if q.contains("founded before 1900") {
                    format!(r#"{{"leaf":{founded}}}"#)
                } else {
                    format!(r#"{{"op":"and","left":{{"leaf":{district}}},"right":{{"leaf":{population}}}}}"#)
                };
                format!("```json\n{tree}\n```")
            }
            Role::Verifier => "True".into(),
            Role::Answer => format!("Reading the rows above.\nAnswer: {}", answer_from_table(prompt)),
            Role::Discriminator => "False".into(),
            Role::Keywords => "```json\n[]\n```".into(),
            Role::Embed => String::new(),
        })
    }
}

/// Replays the demo dataset through the oracle and records every call.
pub fn generate_demo_fixture() -> Fixture {
    let cfg = demo_config();
    let recorder = RecordingProvider::new(DemoOracle::default());
    let records = load_dataset(&demo_dir().join("dataset.jsonl")).unwrap();
    Pipeline::new(&cfg, &recorder, &HashingEmbedder)
        .run_records(&records, 1, None)
        .unwrap();
    recorder.into_fixture(true)
}
