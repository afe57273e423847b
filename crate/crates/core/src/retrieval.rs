//! Representative-row retrieval.
//!
//! Two stages. Keywords extracted from the question select a candidate pool
//! by MinHash-estimated Jaccard overlap with each row's tokens; candidates are
//! then re-ranked by `lambda * sem + (1 - lambda) * lex`, where `sem` is
//! embedding cosine mapped to `[0, 1]` and `lex` is the best normalized
//! edit-distance similarity between a keyword and a row token.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::llm::{cosine, extract_json_block, Embedder, LlmProvider, Role};
use crate::prompts;
use crate::table::{Cell, SubTable, Table, CELL_SEPARATOR};
use crate::text::{fnv1a, is_stopword, mix64, words};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Number of representative rows.
    pub k: usize,
    /// Weight of semantic similarity in the ranking score.
    pub lambda: f64,
    pub cap_max: usize,
    pub cap_frac: f64,
    pub minhash_signatures: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lambda: 0.7,
            cap_max: 256,
            cap_frac: 0.1,
            minhash_signatures: 64,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    /// Candidate pool size `min(cap_max, ceil(cap_frac * n))`, at least 1.
    pub fn candidate_cap(&self, n: usize) -> usize {
        // the epsilon keeps 0.1 * 30 from ceiling to 4
        let frac = ((self.cap_frac * n as f64) - 1e-9).ceil().max(0.0) as usize;
        frac.min(self.cap_max).max(1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("table has no rows")]
    EmptyTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub row_index: usize,
    pub sem: f64,
    pub lex: f64,
    pub score: f64,
}

/// Keywords for coarse filtering. Falls back to the question's non-stopword
/// tokens when the model reply is unusable.
pub fn extract_keywords(question: &str, provider: &dyn LlmProvider) -> Result<Vec<String>, RetrievalError> {
    if question.trim().is_empty() {
        return Err(RetrievalError::EmptyQuestion);
    }
    let prompt = prompts::render(prompts::KEYWORDS, &[("question", question)]);
    let from_model = match provider.complete(Role::Keywords, &prompt) {
        Ok(reply) => parse_keyword_reply(&reply),
        Err(e) => {
            warn!("keyword extraction failed, using question tokens: {e}");
            Vec::new()
        }
    };
    if !from_model.is_empty() {
        return Ok(from_model);
    }
    Ok(fallback_keywords(question))
}

fn parse_keyword_reply(reply: &str) -> Vec<String> {
    let Some(serde_json::Value::Array(items)) = extract_json_block(reply) else {
        return Vec::new();
    };
    dedup(
        items
            .iter()
            .filter_map(|v| v.as_str())
            .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()),
    )
}

fn dedup(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

pub fn fallback_keywords(question: &str) -> Vec<String> {
    let content = dedup(words(question).filter(|w| !is_stopword(w)));
    if !content.is_empty() {
        return content;
    }
    let all = dedup(words(question));
    if !all.is_empty() {
        return all;
    }
    vec![question.trim().to_lowercase()]
}

/// Seeded MinHash over token sets.
#[derive(Debug, Clone)]
pub struct MinHasher {
    seeds: Vec<u64>,
}

impl MinHasher {
    pub fn new(signatures: usize, seed: u64) -> Self {
        let seeds = (0..signatures as u64)
            .map(|i| mix64(seed ^ mix64(i.wrapping_add(0x5851_f42d_4c95_7f2d))))
            .collect();
        Self { seeds }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn signature<'t>(&self, tokens: impl IntoIterator<Item = &'t str>) -> Vec<u64> {
        let base: Vec<u64> = tokens.into_iter().map(|t| fnv1a(t.as_bytes())).collect();
        self.seeds
            .iter()
            .map(|&s| base.iter().map(|&b| mix64(b ^ s)).min().unwrap_or(u64::MAX))
            .collect()
    }

    /// Fraction of agreeing signature slots. Zero if either set was empty.
    pub fn estimate(a: &[u64], b: &[u64]) -> f64 {
        if a.is_empty() || a.len() != b.len() || a[0] == u64::MAX || b[0] == u64::MAX {
            return 0.0;
        }
        a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }
}

fn row_text(row: &[Cell]) -> String {
    row.iter()
        .map(|c| c.raw().trim())
        .collect::<Vec<_>>()
        .join(CELL_SEPARATOR)
}

fn token_set(text: &str) -> Vec<String> {
    let set: std::collections::BTreeSet<String> = words(text).collect();
    set.into_iter().collect()
}

/// Every row ranked by estimated Jaccard with the keyword tokens, ties by
/// ascending index.
pub fn lsh_rank(table: &Table, keywords: &[String], cfg: &RetrievalConfig) -> Vec<(usize, f64)> {
    let hasher = MinHasher::new(cfg.minhash_signatures.max(1), cfg.seed);
    let kw_tokens = token_set(&keywords.join(" "));
    let query = hasher.signature(kw_tokens.iter().map(String::as_str));
    let mut ranked: Vec<(usize, f64)> = table
        .rows()
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let toks = token_set(&row_text(row));
            let sig = hasher.signature(toks.iter().map(String::as_str));
            (i, MinHasher::estimate(&query, &sig))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// At most `C` candidate rows. Without keywords the first `C` rows pass
/// through.
pub fn lsh_candidates(table: &Table, keywords: &[String], cfg: &RetrievalConfig) -> Vec<usize> {
    let cap = cfg.candidate_cap(table.num_rows());
    if keywords.is_empty() {
        return (0..table.num_rows().min(cap)).collect();
    }
    lsh_rank(table, keywords, cfg)
        .into_iter()
        .take(cap)
        .map(|(i, _)| i)
        .collect()
}

/// `1 - lev(a, b) / max(|a|, |b|)` over characters.
fn edit_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / longest as f64
}

/// Best keyword-to-token similarity. Row tokens are each cell's normalized
/// text plus the whitespace-separated words inside it.
pub fn lexical_similarity(row: &[Cell], keywords: &[String]) -> f64 {
    let mut tokens: Vec<String> = Vec::new();
    for cell in row {
        let text = cell
            .raw()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        if text.is_empty() {
            continue;
        }
        tokens.extend(text.split(' ').map(str::to_string));
        tokens.push(text);
    }
    keywords
        .iter()
        .map(|k| k.trim().to_lowercase())
        .filter(|k| !k.is_empty())
        .flat_map(|k| tokens.iter().map(move |t| edit_similarity(&k, t)).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Scores candidates and sorts by descending score, ties by ascending row
/// index. If the embedder fails, rows are ranked by lexical similarity alone.
pub fn rerank(
    table: &Table,
    candidates: &[usize],
    question: &str,
    keywords: &[String],
    cfg: &RetrievalConfig,
    embedder: &dyn Embedder,
) -> (Vec<ScoredRow>, bool) {
    let lex: Vec<f64> = candidates
        .iter()
        .map(|&i| lexical_similarity(&table.rows()[i], keywords))
        .collect();
    let sem = semantic_scores(table, candidates, question, embedder);
    let degraded = sem.is_none();
    if degraded {
        warn!("embedder failed; re-ranking by lexical similarity only");
    }
    let mut scored: Vec<ScoredRow> = candidates
        .iter()
        .enumerate()
        .map(|(j, &row_index)| match &sem {
            Some(sem) => ScoredRow {
                row_index,
                sem: sem[j],
                lex: lex[j],
                score: cfg.lambda * sem[j] + (1.0 - cfg.lambda) * lex[j],
            },
            None => ScoredRow {
                row_index,
                sem: 0.0,
                lex: lex[j],
                score: lex[j],
            },
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row_index.cmp(&b.row_index)));
    (scored, degraded)
}

fn semantic_scores(table: &Table, candidates: &[usize], question: &str, embedder: &dyn Embedder) -> Option<Vec<f64>> {
    let q = embedder.embed(question).ok()?;
    candidates
        .par_iter()
        .map(|&i| {
            embedder
                .embed(&row_text(&table.rows()[i]))
                .ok()
                .map(|v| (1.0 + cosine(&q, &v)) / 2.0)
        })
        .collect()
}

/// Outcome of the two-stage selection, kept for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected rows in table order.
    pub rows: Vec<usize>,
    pub keywords: Vec<String>,
    pub candidates: Vec<usize>,
    pub scored: Vec<ScoredRow>,
    pub embedder_degraded: bool,
}

impl Selection {
    pub fn subtable<'a>(&self, table: &'a Table) -> SubTable<'a> {
        crate::table::subtable(table, &self.rows).expect("selection indices are in range")
    }
}

/// Picks `min(k, N)` representative rows. When the candidate cap is below
/// `k`, the pool is topped up from the MinHash ranking so the output size
/// stays `min(k, N)`.
pub fn select_representative_rows(
    table: &Table,
    question: &str,
    cfg: &RetrievalConfig,
    provider: &dyn LlmProvider,
    embedder: &dyn Embedder,
) -> Result<Selection, RetrievalError> {
    if question.trim().is_empty() {
        return Err(RetrievalError::EmptyQuestion);
    }
    let n = table.num_rows();
    if n == 0 {
        return Err(RetrievalError::EmptyTable);
    }
    let k = cfg.k.max(1);
    if n <= k {
        return Ok(Selection {
            rows: (0..n).collect(),
            keywords: Vec::new(),
            candidates: Vec::new(),
            scored: Vec::new(),
            embedder_degraded: false,
        });
    }
    let keywords = extract_keywords(question, provider)?;
    let pool = cfg.candidate_cap(n).max(k);
    let candidates: Vec<usize> = lsh_rank(table, &keywords, cfg)
        .into_iter()
        .take(pool)
        .map(|(i, _)| i)
        .collect();
    let (scored, embedder_degraded) = rerank(table, &candidates, question, &keywords, cfg, embedder);
    let mut rows: Vec<usize> = scored.iter().take(k).map(|s| s.row_index).collect();
    rows.sort_unstable();
    Ok(Selection {
        rows,
        keywords,
        candidates,
        scored,
        embedder_degraded,
    })
}
