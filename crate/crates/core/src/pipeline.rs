//! End-to-end orchestration: retrieval, question denoising, table pruning
//! and answer generation, plus the dataset evaluation loop.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{Config, DiscriminatorKind, EvalMode};
use crate::denoise::{denoise_question, DenoiseError, DenoiseOutcome, ReliableEvidenceSet};
use crate::eval::{difficulty, exact_match, extract_answer, fact_match, Difficulty};
use crate::llm::{
    ConditionEquivalence, CountingProvider, Embedder, LlmProvider, ModelDiscriminator, Role, RuleBasedDiscriminator,
};
use crate::prompts;
use crate::retrieval::{select_representative_rows, RetrievalError, Selection};
use crate::table::{compression_rate, load_table, SubTable, Table, TableError};
use crate::toolkit::Evidence;
use crate::tree::{
    construct_tree, execute, verify_and_finalize, Construction, EvidenceTree, ExecutionTrace, FinalOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset {path} unreadable: {reason}")]
    DatasetUnreadable { path: PathBuf, reason: String },
    #[error("record {0}: no table given")]
    MissingTable(String),
    #[error("table error: {0}")]
    Table(#[from] TableError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error("cannot write trace: {0}")]
    TraceIo(#[from] std::io::Error),
}

impl PipelineError {
    /// Input problems as opposed to internal failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::DatasetUnreadable { .. }
                | PipelineError::MissingTable(_)
                | PipelineError::Table(_)
                | PipelineError::Retrieval(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InlineTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<InlineTable>,
    #[serde(default)]
    pub answers: Vec<String>,
}

impl QuestionRecord {
    pub fn load_table(&self) -> Result<Table, PipelineError> {
        if let Some(t) = &self.table {
            return Ok(Table::from_strings(self.id.clone(), t.headers.clone(), t.rows.clone())?.0);
        }
        match &self.table_path {
            Some(p) => Ok(load_table(p)?.0),
            None => Err(PipelineError::MissingTable(self.id.clone())),
        }
    }
}

/// Reads a line-delimited dataset. Relative table paths resolve against the
/// dataset's directory.
pub fn load_dataset(path: &Path) -> Result<Vec<QuestionRecord>, PipelineError> {
    let unreadable = |reason: String| PipelineError::DatasetUnreadable {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| unreadable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: QuestionRecord =
            serde_json::from_str(&line).map_err(|e| unreadable(format!("line {}: {e}", n + 1)))?;
        if let Some(p) = &rec.table_path {
            if p.is_relative() {
                rec.table_path = Some(base.join(p));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// The question with the evidence to focus on and the units to disregard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightedQuestion {
    pub question: String,
    pub relevant: Vec<String>,
    pub ignore: Vec<String>,
}

impl HighlightedQuestion {
    pub fn render(&self) -> String {
        let mut out = format!("Question: {}", self.question.trim());
        if !self.relevant.is_empty() {
            out.push_str("\nRelevant parts of the question:");
            for r in &self.relevant {
                out.push_str("\n- ");
                out.push_str(r);
            }
        }
        if !self.ignore.is_empty() {
            out.push_str("\nIgnore these parts of the question:");
            for r in &self.ignore {
                out.push_str("\n- ");
                out.push_str(r);
            }
        }
        out
    }
}

pub fn highlight_question(
    question: &str,
    reliable: &ReliableEvidenceSet,
    discarded: &[Evidence],
) -> HighlightedQuestion {
    let relevant: Vec<String> = reliable.iter().map(Evidence::to_string).collect();
    let mut ignore: Vec<String> = Vec::new();
    for e in discarded {
        let unit = format!("{} {}", e.area, e.condition);
        if !relevant.contains(&unit) && !ignore.contains(&unit) {
            ignore.push(unit);
        }
    }
    HighlightedQuestion {
        question: question.to_string(),
        relevant,
        ignore,
    }
}

pub fn answer_prompt(table: &SubTable<'_>, highlighted: &HighlightedQuestion) -> String {
    prompts::render(
        prompts::ANSWER,
        &[("table", &table.render()), ("question", &highlighted.render())],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageTrace {
    Retrieval {
        selection: Selection,
    },
    Eqd {
        outcome: DenoiseOutcome,
    },
    Etd {
        tree: Option<EvidenceTree>,
        construction: Option<Construction>,
        execution: ExecutionTrace,
        final_rows: Vec<usize>,
        error: Option<String>,
    },
    Answer {
        highlighted: HighlightedQuestion,
        table_rows: Vec<usize>,
        reply: Option<String>,
        answer: String,
        error: Option<String>,
    },
}

impl StageTrace {
    pub fn name(&self) -> &'static str {
        match self {
            StageTrace::Retrieval { .. } => "retrieval",
            StageTrace::Eqd { .. } => "eqd",
            StageTrace::Etd { .. } => "etd",
            StageTrace::Answer { .. } => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTrace {
    pub id: String,
    pub question: String,
    pub stages: Vec<StageTrace>,
}

impl QuestionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(StageTrace::name).collect()
    }
}

/// Result of everything before answer generation.
#[derive(Debug, Clone)]
pub struct Pruned<'t> {
    pub table: SubTable<'t>,
    pub trace: QuestionTrace,
    pub reliable: ReliableEvidenceSet,
    pub discarded: Vec<Evidence>,
    pub rollback_count: usize,
    pub verifier_outcome: Option<FinalOutcome>,
    pub etd_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub attempt: usize,
    pub predicted: String,
    pub golds: Vec<String>,
    pub correct: bool,
    pub entire_tokens: usize,
    pub pruned_tokens: usize,
    pub compression_rate: Option<f64>,
    pub rollback_count: usize,
    pub verifier_outcome: Option<FinalOutcome>,
    pub reliable_evidence: usize,
    pub etd_skipped: bool,
    pub provider_exhausted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportRow {
    fn failed(rec: &QuestionRecord, attempt: usize, error: String) -> Self {
        ReportRow {
            id: rec.id.clone(),
            attempt,
            predicted: String::new(),
            golds: rec.answers.clone(),
            correct: false,
            entire_tokens: 0,
            pruned_tokens: 0,
            compression_rate: None,
            rollback_count: 0,
            verifier_outcome: None,
            reliable_evidence: 0,
            etd_skipped: true,
            provider_exhausted: false,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Answered {
    pub answer: String,
    pub trace: QuestionTrace,
    pub row: ReportRow,
}

/// Wiring for one run: configuration plus the model roles.
pub struct Pipeline<'a> {
    pub config: &'a Config,
    pub provider: &'a dyn LlmProvider,
    pub embedder: &'a dyn Embedder,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a Config, provider: &'a dyn LlmProvider, embedder: &'a dyn Embedder) -> Self {
        Self {
            config,
            provider,
            embedder,
        }
    }

    fn discriminator(&self) -> Box<dyn ConditionEquivalence + 'a> {
        match self.config.eqd.discriminator {
            DiscriminatorKind::Model => Box::new(ModelDiscriminator::new(self.provider)),
            DiscriminatorKind::RuleBased => Box::new(RuleBasedDiscriminator),
        }
    }

    /// Retrieval, question denoising and table pruning. When no evidence
    /// survives, pruning is skipped and the full table is kept.
    pub fn prune<'t>(&self, id: &str, question: &str, table: &'t Table) -> Result<Pruned<'t>, PipelineError> {
        let cfg = self.config;
        let mut stages = Vec::new();
        let selection = select_representative_rows(table, question, &cfg.retrieval, self.provider, self.embedder)?;
        let rep = selection.subtable(table);
        stages.push(StageTrace::Retrieval {
            selection: selection.clone(),
        });

        let mut disc = self.discriminator();
        let outcome = denoise_question(
            question,
            table,
            &rep,
            cfg.eqd.rounds,
            cfg.eqd.alpha,
            self.provider,
            disc.as_mut(),
        )?;
        let reliable = outcome.reliable.clone();
        let discarded = outcome.discarded.clone();
        stages.push(StageTrace::Eqd { outcome });

        let mut pruned = Pruned {
            table: table.full(),
            trace: QuestionTrace {
                id: id.to_string(),
                question: question.to_string(),
                stages: Vec::new(),
            },
            reliable,
            discarded,
            rollback_count: 0,
            verifier_outcome: None,
            etd_skipped: true,
        };
        if !pruned.reliable.is_empty() {
            let reliable = pruned.reliable.clone();
            let stage = self.run_etd(question, table, &rep, &reliable, disc.as_mut(), &mut pruned);
            stages.push(stage);
            pruned.etd_skipped = false;
        }
        pruned.trace.stages = stages;
        Ok(pruned)
    }

    fn run_etd<'t>(
        &self,
        question: &str,
        table: &'t Table,
        rep: &SubTable<'_>,
        reliable: &ReliableEvidenceSet,
        disc: &mut dyn ConditionEquivalence,
        pruned: &mut Pruned<'t>,
    ) -> StageTrace {
        let cfg = &self.config.etd;
        let (tree, construction) = match construct_tree(question, rep, reliable, self.provider, disc) {
            Ok(x) => x,
            Err(e) => {
                return StageTrace::Etd {
                    tree: None,
                    construction: None,
                    execution: ExecutionTrace::default(),
                    final_rows: pruned.table.row_indices().to_vec(),
                    error: Some(e.to_string()),
                }
            }
        };
        let (final_table, execution, error) = match execute(&tree, table, cfg.rollback) {
            Ok((result, mut trace)) => {
                let fin = if cfg.verifier {
                    verify_and_finalize(result, &mut trace, question, self.provider)
                } else if result.is_empty() {
                    trace.outcome = Some(FinalOutcome::EmptyResult);
                    table.full()
                } else {
                    result
                };
                (fin, trace, None)
            }
            Err(e) => {
                warn!("tree execution failed, using full table: {e}");
                (table.full(), ExecutionTrace::default(), Some(e.to_string()))
            }
        };
        pruned.rollback_count = execution.rollback_count();
        pruned.verifier_outcome = execution.outcome.clone();
        pruned.table = final_table;
        StageTrace::Etd {
            tree: Some(tree),
            construction: Some(construction),
            execution,
            final_rows: pruned.table.row_indices().to_vec(),
            error,
        }
    }

    /// Full pipeline for one question over an already loaded table.
    pub fn answer_table(&self, rec: &QuestionRecord, table: &Table, attempt: usize) -> Result<Answered, PipelineError> {
        let mut pruned = self.prune(&rec.id, &rec.question, table)?;
        let highlighted = highlight_question(&rec.question, &pruned.reliable, &pruned.discarded);
        let prompt = answer_prompt(&pruned.table, &highlighted);
        let (reply, error) = match self.provider.complete(Role::Answer, &prompt) {
            Ok(r) => (Some(r), None),
            Err(e) => {
                warn!("answer generation failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        let exhausted = reply.is_none();
        let answer = reply.as_deref().map(extract_answer).unwrap_or_default();
        let correct = !exhausted
            && !rec.answers.is_empty()
            && match self.config.pipeline.mode {
                EvalMode::Qa => exact_match(&answer, &rec.answers),
                EvalMode::Fact => fact_match(&answer, &rec.answers),
            };
        pruned.trace.stages.push(StageTrace::Answer {
            highlighted,
            table_rows: pruned.table.row_indices().to_vec(),
            reply,
            answer: answer.clone(),
            error,
        });
        let entire = table.count_tokens();
        let kept = pruned.table.count_tokens();
        let row = ReportRow {
            id: rec.id.clone(),
            attempt,
            predicted: answer.clone(),
            golds: rec.answers.clone(),
            correct,
            entire_tokens: entire,
            pruned_tokens: kept,
            compression_rate: compression_rate(entire, kept).ok(),
            rollback_count: pruned.rollback_count,
            verifier_outcome: pruned.verifier_outcome,
            reliable_evidence: pruned.reliable.len(),
            etd_skipped: pruned.etd_skipped,
            provider_exhausted: exhausted,
            error: None,
        };
        Ok(Answered {
            answer,
            trace: pruned.trace,
            row,
        })
    }

    pub fn answer_question(&self, rec: &QuestionRecord) -> Result<Answered, PipelineError> {
        let table = rec.load_table()?;
        self.answer_table(rec, &table, 0)
    }

    /// Evaluates every record `repeat` times. Records run concurrently up to
    /// the configured parallelism; attempts of one record run in order.
    /// Rows come out in dataset order.
    pub fn run_records(
        &self,
        records: &[QuestionRecord],
        repeat: usize,
        trace_dir: Option<&Path>,
    ) -> Result<RunReport, PipelineError> {
        let repeat = repeat.max(1);
        if let Some(dir) = trace_dir {
            std::fs::create_dir_all(dir)?;
        }
        let counting = CountingProvider::new(self.provider);
        let inner = Pipeline::new(self.config, &counting, self.embedder);
        let one = |rec: &QuestionRecord| -> Result<Vec<ReportRow>, PipelineError> {
            let table = match rec.load_table() {
                Ok(t) => t,
                Err(e) => {
                    warn!(id = %rec.id, "skipping record: {e}");
                    return Ok((0..repeat).map(|a| ReportRow::failed(rec, a, e.to_string())).collect());
                }
            };
            let mut rows = Vec::with_capacity(repeat);
            for attempt in 0..repeat {
                match inner.answer_table(rec, &table, attempt) {
                    Ok(done) => {
                        if let Some(dir) = trace_dir {
                            let name = if repeat > 1 {
                                format!("{}.{attempt}.json", file_stem(&rec.id))
                            } else {
                                format!("{}.json", file_stem(&rec.id))
                            };
                            std::fs::write(dir.join(name), done.trace.to_json())?;
                        }
                        rows.push(done.row);
                    }
                    Err(e) => rows.push(ReportRow::failed(rec, attempt, e.to_string())),
                }
            }
            Ok(rows)
        };
        let threads = self.config.pipeline.parallelism.max(1);
        let per_record: Vec<Vec<ReportRow>> = if threads == 1 {
            records.iter().map(one).collect::<Result<_, _>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            pool.install(|| records.par_iter().map(one).collect::<Result<_, _>>())?
        };
        let calls = counting
            .counts()
            .into_iter()
            .map(|(r, c)| (r.as_str().to_string(), c))
            .collect();
        let report = RunReport::from_rows(self.config.pipeline.mode, repeat, per_record, calls);
        info!(accuracy = report.accuracy, questions = records.len(), "run finished");
        Ok(report)
    }

    pub fn run_dataset(
        &self,
        path: &Path,
        repeat: usize,
        trace_dir: Option<&Path>,
    ) -> Result<RunReport, PipelineError> {
        let records = load_dataset(path)?;
        self.run_records(&records, repeat, trace_dir)
    }
}

/// Record id made safe for use as a file name.
pub fn file_stem(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "question".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEntry {
    pub id: String,
    pub correct: usize,
    pub repeat: usize,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: EvalMode,
    pub repeat: usize,
    pub rows: Vec<ReportRow>,
    pub accuracy: f64,
    pub mean_compression: Option<f64>,
    pub provider_calls: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Vec<BucketEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_counts: Option<BTreeMap<Difficulty, usize>>,
}

impl RunReport {
    pub fn from_rows(
        mode: EvalMode,
        repeat: usize,
        per_record: Vec<Vec<ReportRow>>,
        provider_calls: BTreeMap<String, usize>,
    ) -> Self {
        let buckets = (repeat > 1).then(|| {
            per_record
                .iter()
                .filter_map(|rows| {
                    let first = rows.first()?;
                    let correct = rows.iter().filter(|r| r.correct).count();
                    Some(BucketEntry {
                        id: first.id.clone(),
                        correct,
                        repeat,
                        difficulty: difficulty(correct, repeat),
                    })
                })
                .collect::<Vec<_>>()
        });
        let bucket_counts = buckets.as_ref().map(|b| {
            let mut counts = BTreeMap::new();
            for e in b {
                *counts.entry(e.difficulty).or_insert(0) += 1;
            }
            counts
        });
        let rows: Vec<ReportRow> = per_record.into_iter().flatten().collect();
        let accuracy = if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64
        };
        let rates: Vec<f64> = rows.iter().filter_map(|r| r.compression_rate).collect();
        let mean_compression = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
        RunReport {
            mode,
            repeat,
            rows,
            accuracy,
            mean_compression,
            provider_calls,
            buckets,
            bucket_counts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable compression summary.
    pub fn compression_summary(&self) -> String {
        let entire: usize = self.rows.iter().map(|r| r.entire_tokens).sum();
        let pruned: usize = self.rows.iter().map(|r| r.pruned_tokens).sum();
        let mut out = format!(
            "questions: {}\naccuracy: {:.4}\nentire tokens: {entire}\npruned tokens: {pruned}\n",
            self.rows.len(),
            self.accuracy
        );
        match self.mean_compression {
            Some(m) => out.push_str(&format!("mean compression rate: {m:.1}%\n")),
            None => out.push_str("mean compression rate: n/a\n"),
        }
        if let Ok(total) = compression_rate(entire, pruned) {
            out.push_str(&format!("overall compression rate: {total:.1}%\n"));
        }
        let rollbacks: usize = self.rows.iter().map(|r| r.rollback_count).sum();
        out.push_str(&format!("and-to-or rollbacks: {rollbacks}\n"));
        if let Some(counts) = &self.bucket_counts {
            for (d, n) in counts {
                out.push_str(&format!("{d:?}: {n}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::Action;
    use crate::llm::{FnProvider, HashingEmbedder};

    fn demo_record() -> QuestionRecord {
        QuestionRecord {
            id: "q1".into(),
            question: "how many cities in Tel Aviv, updated in 2018".into(),
            table_path: None,
            table: Some(InlineTable {
                headers: vec!["City".into(), "District".into(), "Updated".into()],
                rows: vec![
                    vec!["Tel Aviv".into(), "Tel Aviv".into(), "2019".into()],
                    vec!["Holon".into(), "Tel Aviv".into(), "2019".into()],
                    vec!["Haifa".into(), "Haifa".into(), "2019".into()],
                ],
            }),
            answers: vec!["2".into()],
        }
    }

    #[test]
    fn highlight_examples() {
        let e1 = Evidence::new("District", "Tel Aviv", Action::StringMatch);
        let er = ReliableEvidenceSet { evidences: vec![e1] };
        let h = highlight_question("q", &er, &[Evidence::new("Cycle", "4", Action::NumericCompare)]);
        assert_eq!(h.relevant, ["District: Tel Aviv (string_match)"]);
        assert_eq!(h.ignore, ["Cycle 4"]);
        let text = h.render();
        assert!(text.starts_with("Question: q\n"));
        assert!(text.contains("- Cycle 4"));
        let bare = highlight_question("just this?", &ReliableEvidenceSet::default(), &[]);
        assert_eq!(bare.render(), "Question: just this?");
    }

    fn rule_provider() -> impl LlmProvider {
        FnProvider(|role, prompt: &str| {
            Ok(match role {
                Role::Evidence => "```json\n[{\"area\":\"District\",\"condition\":\"Tel Aviv\",\"action\":\"string_match\"},{\"area\":\"Updated\",\"condition\":\"2018\",\"action\":\"date_eval\"}]\n```".into(),
                Role::Tree => "{\"leaf\":{\"area\":\"District\",\"condition\":\"Tel Aviv\",\"action\":\"string_match\"}}".into(),
                Role::Verifier => "True".into(),
                Role::Answer => {
                    let rows = prompt.lines().filter(|l| l.contains(" | Tel Aviv | ")).count();
                    format!("Answer: {rows}")
                }
                _ => String::new(),
            })
        })
    }

    #[test]
    fn end_to_end_with_rules() {
        let cfg = Config::default();
        let p = rule_provider();
        let pipe = Pipeline::new(&cfg, &p, &HashingEmbedder);
        let done = pipe.answer_question(&demo_record()).unwrap();
        assert_eq!(done.answer, "2");
        assert!(done.row.correct);
        assert_eq!(done.trace.stage_names(), ["retrieval", "eqd", "etd", "answer"]);
        match &done.trace.stages[2] {
            StageTrace::Etd { final_rows, .. } => assert_eq!(final_rows, &[0, 1]),
            _ => unreachable!(),
        }
        assert_eq!(done.row.verifier_outcome, Some(FinalOutcome::Accepted));
    }

    #[test]
    fn empty_evidence_skips_pruning() {
        let cfg = Config::default();
        let p = FnProvider(|role, _: &str| {
            Ok(match role {
                Role::Evidence => "```json\n[]\n```".to_string(),
                _ => "Answer: 3".to_string(),
            })
        });
        let pipe = Pipeline::new(&cfg, &p, &HashingEmbedder);
        let done = pipe.answer_question(&demo_record()).unwrap();
        assert_eq!(done.trace.stage_names(), ["retrieval", "eqd", "answer"]);
        assert!(done.row.etd_skipped);
        assert_eq!(done.row.pruned_tokens, done.row.entire_tokens);
        assert!(!done.row.correct);
    }

    #[test]
    fn answer_failure_is_not_fatal() {
        let cfg = Config::default();
        let p = crate::llm::ScriptedProvider::new(crate::llm::Fixture::empty(true));
        let pipe = Pipeline::new(&cfg, &p, &HashingEmbedder);
        let done = pipe.answer_question(&demo_record()).unwrap();
        assert_eq!(done.answer, "");
        assert!(done.row.provider_exhausted && !done.row.correct);
    }

    #[test]
    fn report_aggregates_and_buckets() {
        let cfg = Config::default();
        let p = rule_provider();
        let pipe = Pipeline::new(&cfg, &p, &HashingEmbedder);
        let mut wrong = demo_record();
        wrong.id = "q2".into();
        wrong.answers = vec!["5".into()];
        let mut missing = demo_record();
        missing.id = "q3".into();
        missing.table = None;
        let report = pipe.run_records(&[demo_record(), wrong, missing], 10, None).unwrap();
        assert_eq!(report.rows.len(), 30);
        assert!((report.accuracy - 10.0 / 30.0).abs() < 1e-12);
        let b = report.buckets.as_ref().unwrap();
        assert_eq!(b[0].difficulty, Difficulty::Easy);
        assert_eq!(b[1].difficulty, Difficulty::ExtraHard);
        let rates: Vec<f64> = report.rows.iter().filter_map(|r| r.compression_rate).collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((report.mean_compression.unwrap() - mean).abs() <= 1e-9);
        assert_eq!(report.provider_calls["answer"], 20);

        let single = pipe.run_records(&[demo_record()], 1, None).unwrap();
        assert!(single.buckets.is_none());
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut cfg = Config::default();
        let p = rule_provider();
        let records: Vec<QuestionRecord> = (0..8)
            .map(|i| QuestionRecord {
                id: format!("q{i}"),
                ..demo_record()
            })
            .collect();
        let seq = Pipeline::new(&cfg, &p, &HashingEmbedder)
            .run_records(&records, 1, None)
            .unwrap();
        cfg.pipeline.parallelism = 4;
        let par = Pipeline::new(&cfg, &p, &HashingEmbedder)
            .run_records(&records, 1, None)
            .unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn dataset_loading() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.csv"), "A,B\n1,2\n").unwrap();
        std::fs::write(
            dir.path().join("d.jsonl"),
            "{\"id\":\"a\",\"question\":\"q\",\"table_path\":\"t.csv\",\"answers\":[\"1\"]}\n\n",
        )
        .unwrap();
        let recs = load_dataset(&dir.path().join("d.jsonl")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].load_table().unwrap().num_rows(), 1);
        assert!(matches!(
            load_dataset(&dir.path().join("nope.jsonl")),
            Err(PipelineError::DatasetUnreadable { .. })
        ));
        std::fs::write(dir.path().join("bad.jsonl"), "{oops\n").unwrap();
        assert!(load_dataset(&dir.path().join("bad.jsonl")).is_err());
    }
}
