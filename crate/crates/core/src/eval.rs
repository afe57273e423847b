//! Answer scoring and difficulty bucketing.

use serde::{Deserialize, Serialize};

use crate::table::parse_number;

const NUMERIC_TOLERANCE: f64 = 1e-6;

/// Trim, casefold, strip enclosing quotes and a trailing period.
pub fn normalize_answer(s: &str) -> String {
    let mut t = s.trim().to_lowercase();
    loop {
        let before = t.len();
        if let Some(rest) = t.strip_suffix('.') {
            t = rest.trim_end().to_string();
        }
        for q in ['"', '\'', '`'] {
            if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
                t = t[1..t.len() - 1].trim().to_string();
            }
        }
        if t.len() == before {
            break;
        }
    }
    t
}

fn items(s: &str) -> Vec<String> {
    s.split('|').map(normalize_answer).collect()
}

fn item_eq(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    match (parse_number(a), parse_number(b)) {
        (Some(x), Some(y)) => (x - y).abs() <= NUMERIC_TOLERANCE,
        _ => false,
    }
}

/// Multiset equality under [`item_eq`], by greedy pairing.
fn multiset_eq(a: &[String], b: &[String]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut used = vec![false; b.len()];
    a.iter()
        .all(|x| match (0..b.len()).find(|&j| !used[j] && item_eq(x, &b[j])) {
            Some(j) => {
                used[j] = true;
                true
            }
            None => false,
        })
}

/// True if the prediction matches any gold answer. Each side may hold
/// several answers separated by `|`, compared as multisets. A list of
/// several golds also matches when the prediction lists all of them.
pub fn exact_match(predicted: &str, golds: &[String]) -> bool {
    let p = items(predicted);
    if golds.iter().any(|g| multiset_eq(&p, &items(g))) {
        return true;
    }
    if golds.len() > 1 {
        let all: Vec<String> = golds.iter().flat_map(|g| items(g)).collect();
        return multiset_eq(&p, &all);
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactLabel {
    Entailed,
    Refuted,
}

pub fn parse_fact_label(s: &str) -> Option<FactLabel> {
    match normalize_answer(s).as_str() {
        "entailed" | "entails" | "true" | "yes" | "1" | "supported" => Some(FactLabel::Entailed),
        "refuted" | "refutes" | "false" | "no" | "0" => Some(FactLabel::Refuted),
        _ => None,
    }
}

/// Binary label agreement; an unrecognized prediction is wrong.
pub fn fact_match(predicted: &str, golds: &[String]) -> bool {
    match parse_fact_label(predicted) {
        Some(p) => golds.iter().any(|g| parse_fact_label(g) == Some(p)),
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    ExtraHard,
}

/// Buckets by share of correct answers over `repeat` attempts, with
/// inclusive lower edges at 90%, 60% and 10%.
pub fn difficulty(correct: usize, repeat: usize) -> Difficulty {
    let (c, r) = (correct * 100, repeat);
    if c >= 90 * r {
        Difficulty::Easy
    } else if c >= 60 * r {
        Difficulty::Medium
    } else if c >= 10 * r {
        Difficulty::Hard
    } else {
        Difficulty::ExtraHard
    }
}

/// Last `Answer:` line of a reply, or its last non-empty line.
pub fn extract_answer(reply: &str) -> String {
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    for line in lines.iter().rev() {
        if line.get(..7).is_some_and(|h| h.eq_ignore_ascii_case("answer:")) {
            return line[7..].trim().to_string();
        }
    }
    lines.last().map(|l| l.to_string()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("2", &g(&["2"])));
        assert!(exact_match("2.0", &g(&["2"])));
        assert!(exact_match("Tel Aviv", &g(&["tel aviv."])));
        assert!(exact_match(" \"Haifa\" ", &g(&["haifa"])));
        assert!(!exact_match("3", &g(&["2"])));
        assert!(exact_match("b | a", &g(&["a|b"])));
        assert!(exact_match("a|b", &g(&["a", "b"])));
        assert!(!exact_match("a|a", &g(&["a|b"])));
        assert!(exact_match("1,000", &g(&["1000"])));
        assert!(!exact_match("", &g(&["x"])));
    }

    #[test]
    fn fact_labels() {
        assert!(fact_match("Entailed", &g(&["entailed"])));
        assert!(fact_match("true", &g(&["entailed"])));
        assert!(!fact_match("refuted", &g(&["entailed"])));
        assert!(!fact_match("maybe", &g(&["entailed"])));
    }

    #[test]
    fn buckets() {
        assert_eq!(difficulty(9, 10), Difficulty::Easy);
        assert_eq!(difficulty(89, 100), Difficulty::Medium);
        assert_eq!(difficulty(60, 100), Difficulty::Medium);
        assert_eq!(difficulty(59, 100), Difficulty::Hard);
        assert_eq!(difficulty(10, 100), Difficulty::Hard);
        assert_eq!(difficulty(9, 100), Difficulty::ExtraHard);
        assert_eq!(difficulty(0, 1), Difficulty::ExtraHard);
        assert_eq!(difficulty(1, 1), Difficulty::Easy);
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("thinking...\nAnswer: 2"), "2");
        assert_eq!(extract_answer("answer: a | b\n"), "a | b");
        assert_eq!(extract_answer("just this"), "just this");
        assert_eq!(extract_answer(""), "");
    }
}
