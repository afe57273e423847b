//! Dual-denoising table question answering.
//!
//! A question is decomposed into evidence (column, condition, action)
//! triples, which are filtered for consistency across sampled rounds and for
//! grounding in the table. The surviving evidence is arranged into a binary
//! And/Or tree that prunes the table step by step, with And-to-Or rollback
//! when an intersection comes up empty and a verifier pass before the final
//! answer is generated.

pub mod condition;
pub mod config;
pub mod denoise;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod table;
pub mod text;
pub mod toolkit;
pub mod tree;

pub use condition::{eval_predicate, parse_condition, Action, Predicate};
pub use config::Config;
pub use denoise::{
    consistency_assess, generate_evidence_rounds, usability_filter, EvidenceRounds, ReliableEvidenceSet,
};
pub use pipeline::{Pipeline, QuestionRecord, RunReport};
pub use table::{compression_rate, count_tokens, parse_table, subtable, Cell, CellValue, SubTable, Table, TableFormat};
pub use toolkit::{apply_evidence, check_usability, merge, Evidence, LogicOp};
pub use tree::{execute, postorder, verify_and_finalize, EvidenceTree, ExecutionTrace};
