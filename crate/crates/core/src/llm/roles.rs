//! Role-specific calls: the condition discriminator, the table verifier, and
//! structured-block extraction for parsers.

use std::collections::HashMap;

use serde_json::Value;
use tracing::warn;

use super::{LlmProvider, ProviderError, Role};
use crate::prompts;
use crate::table::collapse_whitespace;

/// Decides whether two conditions are semantically equivalent.
pub trait ConditionEquivalence {
    fn equivalent(&mut self, a: &str, b: &str) -> bool;
}

impl<F: FnMut(&str, &str) -> bool> ConditionEquivalence for F {
    fn equivalent(&mut self, a: &str, b: &str) -> bool {
        self(a, b)
    }
}

const LEADING_WORDS: &[&str] = &["in", "is"];

fn rule_normal_form(s: &str) -> String {
    let mut t = collapse_whitespace(s).to_lowercase();
    loop {
        let before = t.len();
        if let Some(rest) = t.strip_prefix("==") {
            t = rest.trim_start().to_string();
        }
        for w in LEADING_WORDS {
            if let Some(rest) = t.strip_prefix(w) {
                if rest.starts_with(char::is_whitespace) {
                    t = rest.trim_start().to_string();
                }
            }
        }
        if t.len() == before {
            break;
        }
    }
    t.trim_matches(|c| matches!(c, '"' | '\'' | '`')).trim().to_string()
}

/// Equality after casefolding, trimming and stripping leading `in`, `==`
/// and `is`.
pub fn rule_equivalent(a: &str, b: &str) -> bool {
    rule_normal_form(a) == rule_normal_form(b)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedDiscriminator;

impl ConditionEquivalence for RuleBasedDiscriminator {
    fn equivalent(&mut self, a: &str, b: &str) -> bool {
        rule_equivalent(a, b)
    }
}

fn parse_bool(reply: &str) -> Option<bool> {
    let t = reply
        .trim()
        .trim_end_matches('.')
        .trim_matches(|c| matches!(c, '"' | '\'' | '`' | '*'))
        .trim()
        .to_lowercase();
    match t.as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Asks the discriminator model once. Pairs are put in a fixed order before
/// the call so the verdict is symmetric; equal normal forms short-circuit
/// without a call. Any failure falls back to [`rule_equivalent`].
pub fn discriminate(provider: &dyn LlmProvider, a: &str, b: &str) -> bool {
    if rule_equivalent(a, b) {
        return true;
    }
    let (first, second) = if a <= b { (a, b) } else { (b, a) };
    let prompt = prompts::render(prompts::DISCRIMINATOR, &[("first", first), ("second", second)]);
    match provider.complete(Role::Discriminator, &prompt) {
        Ok(reply) => parse_bool(&reply).unwrap_or(false),
        Err(e) => {
            warn!("discriminator unavailable, using equality rule: {e}");
            false
        }
    }
}

/// Model-backed discriminator with a per-question cache keyed by unordered
/// pair.
pub struct ModelDiscriminator<'p> {
    provider: &'p dyn LlmProvider,
    cache: HashMap<(String, String), bool>,
}

impl<'p> ModelDiscriminator<'p> {
    pub fn new(provider: &'p dyn LlmProvider) -> Self {
        Self {
            provider,
            cache: HashMap::new(),
        }
    }
}

impl ConditionEquivalence for ModelDiscriminator<'_> {
    fn equivalent(&mut self, a: &str, b: &str) -> bool {
        let key = if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        let v = discriminate(self.provider, &key.0, &key.1);
        self.cache.insert(key, v);
        v
    }
}

/// Strict True/False parse; anything else counts as True so verifier noise
/// never throws data away.
pub fn parse_verifier_reply(reply: &str) -> bool {
    parse_bool(reply).unwrap_or(true)
}

/// Asks the verifier whether the rendered table suffices for the question.
pub fn verify_table(provider: &dyn LlmProvider, rendering: &str, question: &str) -> Result<bool, ProviderError> {
    let prompt = prompts::render(prompts::VERIFIER, &[("table", rendering), ("question", question)]);
    provider
        .complete(Role::Verifier, &prompt)
        .map(|r| parse_verifier_reply(&r))
}

/// First well-formed JSON value in a fenced block; if the text has no
/// parseable fenced block, the whole text is tried as JSON.
pub fn extract_json_block(text: &str) -> Option<Value> {
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip an optional language tag on the fence line
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let tag = &after[..body_start];
        let body_start = if tag.trim().chars().all(|c| c.is_ascii_alphanumeric()) {
            body_start
        } else {
            0
        };
        let body = &after[body_start..];
        let Some(close) = body.find("```") else {
            break;
        };
        if let Ok(v) = serde_json::from_str::<Value>(body[..close].trim()) {
            return Some(v);
        }
        rest = &body[close + 3..];
    }
    serde_json::from_str::<Value>(text.trim()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Fixture, FnProvider, ScriptedProvider};
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn rule_equivalence() {
        assert!(rule_equivalent("in Center", "== Center"));
        assert!(rule_equivalent("Tel Aviv", "in  tel aviv"));
        assert!(rule_equivalent("is 'X'", "x"));
        assert!(!rule_equivalent("Tel Aviv", "Haifa"));
        assert!(!rule_equivalent("> 5", "5"));
    }

    #[test]
    fn reflexive_without_model_call() {
        let calls = AtomicUsize::new(0);
        let p = FnProvider(|_, _: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("False".to_string())
        });
        assert!(discriminate(&p, "x", "x"));
        assert!(discriminate(&p, "in Center", "== Center"));
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn symmetric_prompt_and_cache() {
        let seen = std::sync::Mutex::new(Vec::new());
        let p = FnProvider(|_, prompt: &str| {
            seen.lock().unwrap().push(prompt.to_string());
            Ok("True".to_string())
        });
        let mut d = ModelDiscriminator::new(&p);
        assert!(d.equivalent("Tel Aviv", "TLV"));
        assert!(d.equivalent("TLV", "Tel Aviv"));
        assert_eq!(seen.lock().unwrap().len(), 1);
        assert!(discriminate(&p, "TLV", "Tel Aviv"));
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0], seen[1]);
    }

    #[test]
    fn provider_failure_falls_back_to_rule() {
        let p = ScriptedProvider::new(Fixture::empty(true));
        assert!(!discriminate(&p, "Tel Aviv", "Haifa"));
        assert!(discriminate(&p, "Tel Aviv", "in tel aviv"));
        // lenient default is unparseable, same fallback
        let p = ScriptedProvider::new(Fixture::empty(false));
        assert!(!discriminate(&p, "Tel Aviv", "Haifa"));
    }

    #[test]
    fn verifier_replies() {
        assert!(parse_verifier_reply("True"));
        assert!(parse_verifier_reply(" true. "));
        assert!(!parse_verifier_reply("False"));
        assert!(!parse_verifier_reply("**False**"));
        assert!(parse_verifier_reply("the table is sufficient"));
        let p = FnProvider(|_, _: &str| Ok("False".to_string()));
        assert!(!verify_table(&p, "t", "q").unwrap());
    }

    #[test]
    fn json_block_extraction() {
        let text = "Sure!\n```json\n[1, 2]\n```\nand ```json\n[3]\n```";
        assert_eq!(extract_json_block(text), Some(serde_json::json!([1, 2])));
        let text = "```\nnot json\n```\n```json\n{\"a\":1}\n```";
        assert_eq!(extract_json_block(text), Some(serde_json::json!({"a": 1})));
        assert_eq!(extract_json_block(" [\"x\"] "), Some(serde_json::json!(["x"])));
        assert_eq!(extract_json_block("no json here"), None);
        assert_eq!(extract_json_block("```json\n[1,"), None);
        assert_eq!(extract_json_block("```[1]```"), Some(serde_json::json!([1])));
    }
}
