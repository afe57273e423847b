//! Evidence trees: construction, post-order execution with And-to-Or
//! rollback, and verifier-driven finalization.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::denoise::{prompt_context, ReliableEvidenceSet};
use crate::llm::{extract_json_block, verify_table, ConditionEquivalence, LlmProvider, Role};
use crate::prompts;
use crate::table::{SubTable, Table};
use crate::toolkit::{apply_evidence, merge_sorted, Evidence, LogicOp};

/// Binary And/Or tree over evidence. Serializes as
/// `{"op":..,"left":..,"right":..}` or `{"leaf":..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvidenceTree {
    Internal {
        op: LogicOp,
        left: Box<EvidenceTree>,
        right: Box<EvidenceTree>,
    },
    Leaf {
        leaf: Evidence,
    },
}

impl EvidenceTree {
    pub fn leaf(e: Evidence) -> Self {
        EvidenceTree::Leaf { leaf: e }
    }

    pub fn node(op: LogicOp, left: EvidenceTree, right: EvidenceTree) -> Self {
        EvidenceTree::Internal {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn and(left: EvidenceTree, right: EvidenceTree) -> Self {
        Self::node(LogicOp::And, left, right)
    }

    pub fn or(left: EvidenceTree, right: EvidenceTree) -> Self {
        Self::node(LogicOp::Or, left, right)
    }

    pub fn size(&self) -> usize {
        match self {
            EvidenceTree::Leaf { .. } => 1,
            EvidenceTree::Internal { left, right, .. } => 1 + left.size() + right.size(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            EvidenceTree::Leaf { .. } => 0,
            EvidenceTree::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Leaves from left to right.
    pub fn leaves(&self) -> Vec<&Evidence> {
        let mut out = Vec::new();
        fn walk<'t>(t: &'t EvidenceTree, out: &mut Vec<&'t Evidence>) {
            match t {
                EvidenceTree::Leaf { leaf } => out.push(leaf),
                EvidenceTree::Internal { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serializes")
    }

    /// Left-deep And chain over the evidence, in order.
    pub fn and_chain(evidences: &[Evidence]) -> Option<Self> {
        let mut it = evidences.iter().cloned().map(Self::leaf);
        let first = it.next()?;
        Some(it.fold(first, Self::and))
    }
}

impl fmt::Display for EvidenceTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvidenceTree::Leaf { leaf } => write!(f, "[{leaf}]"),
            EvidenceTree::Internal { op, left, right } => write!(f, "({left} {op} {right})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FlatNode {
    Leaf(Evidence),
    Internal { op: LogicOp, left: usize, right: usize },
}

/// Arena form of a tree. Node ids are preorder positions, so the root is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatTree {
    nodes: Vec<FlatNode>,
}

impl FlatTree {
    pub fn new(tree: &EvidenceTree) -> Self {
        fn push(t: &EvidenceTree, nodes: &mut Vec<FlatNode>) -> usize {
            let id = nodes.len();
            match t {
                EvidenceTree::Leaf { leaf } => nodes.push(FlatNode::Leaf(leaf.clone())),
                EvidenceTree::Internal { op, left, right } => {
                    nodes.push(FlatNode::Internal {
                        op: *op,
                        left: 0,
                        right: 0,
                    });
                    let l = push(left, nodes);
                    let r = push(right, nodes);
                    nodes[id] = FlatNode::Internal {
                        op: *op,
                        left: l,
                        right: r,
                    };
                }
            }
            id
        }
        let mut nodes = Vec::with_capacity(tree.size());
        push(tree, &mut nodes);
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        // iterative: emit after both children are done
        let mut stack = vec![(0usize, false)];
        while let Some((id, expanded)) = stack.pop() {
            match (&self.nodes[id], expanded) {
                (FlatNode::Internal { left, right, .. }, false) => {
                    stack.push((id, true));
                    stack.push((*right, false));
                    stack.push((*left, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    fn label(&self, id: usize) -> String {
        match &self.nodes[id] {
            FlatNode::Leaf(e) => e.to_string(),
            FlatNode::Internal { op, .. } => op.to_string(),
        }
    }
}

/// Node ids (preorder numbering) in post-order.
pub fn postorder(tree: &EvidenceTree) -> Vec<usize> {
    FlatTree::new(tree).postorder()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("leaf {node} ({evidence}) is not usable on the table: {reason}")]
    LeafNotUsable {
        node: usize,
        evidence: Evidence,
        reason: String,
    },
    #[error("no reliable evidence to build a tree from")]
    NoEvidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Leaf,
    And,
    Or,
}

/// One And-to-Or flip made while repairing an empty intersection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackEvent {
    pub flipped: usize,
    /// Rows of the flipped node before and after the flip.
    pub flipped_before: Vec<usize>,
    pub flipped_after: Vec<usize>,
    /// Rows of the node being repaired after this attempt.
    pub result: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub node: usize,
    pub kind: NodeKind,
    pub label: String,
    pub pre_rollback_size: usize,
    pub rollbacks: Vec<RollbackEvent>,
    pub rows: Vec<usize>,
    /// An And node produced an empty intersection.
    pub empty_and: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierAttempt {
    /// Trace node whose rows were checked.
    pub node: usize,
    pub rows: Vec<usize>,
    /// `None` when the verifier could not be reached.
    pub verdict: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FinalOutcome {
    /// Verifier accepted the tree result.
    Accepted,
    /// Verifier rejected the result and accepted an earlier node's rows.
    RolledBack {
        node: usize,
    },
    FullTable,
    /// Verifier unavailable; the candidate was kept unchecked.
    Unverified {
        node: usize,
    },
    /// The tree produced no rows, so the full table is used without asking.
    EmptyResult,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
    pub verifier: Vec<VerifierAttempt>,
    pub outcome: Option<FinalOutcome>,
}

impl ExecutionTrace {
    pub fn rollback_count(&self) -> usize {
        self.entries.iter().map(|e| e.rollbacks.len()).sum()
    }
}

struct Executor<'a> {
    flat: FlatTree,
    table: &'a Table,
    ops: Vec<Option<LogicOp>>,
    rows: Vec<Vec<usize>>,
}

impl<'a> Executor<'a> {
    fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.flat.nodes[id] {
            FlatNode::Internal { left, right, .. } => Some((left, right)),
            FlatNode::Leaf(_) => None,
        }
    }

    fn combine(&self, id: usize) -> Vec<usize> {
        let (l, r) = self.children(id).expect("internal node");
        merge_sorted(&self.rows[l], &self.rows[r], self.ops[id].expect("internal op"))
    }

    fn visit(&mut self, id: usize, rollback: bool) -> Result<TraceEntry, TreeError> {
        let label = self.flat.label(id);
        match self.flat.nodes[id].clone() {
            FlatNode::Leaf(e) => {
                let sub = apply_evidence(self.table, &e).map_err(|err| TreeError::LeafNotUsable {
                    node: id,
                    evidence: e.clone(),
                    reason: err.to_string(),
                })?;
                if sub.is_empty() {
                    return Err(TreeError::LeafNotUsable {
                        node: id,
                        evidence: e,
                        reason: "no matching rows".into(),
                    });
                }
                self.rows[id] = sub.row_indices().to_vec();
                Ok(TraceEntry {
                    node: id,
                    kind: NodeKind::Leaf,
                    label,
                    pre_rollback_size: self.rows[id].len(),
                    rollbacks: Vec::new(),
                    rows: self.rows[id].clone(),
                    empty_and: false,
                })
            }
            FlatNode::Internal { op, .. } => {
                self.rows[id] = self.combine(id);
                let pre = self.rows[id].len();
                let empty_and = pre == 0 && op == LogicOp::And;
                let rollbacks = if empty_and && rollback {
                    self.and2or(id)
                } else {
                    Vec::new()
                };
                Ok(TraceEntry {
                    node: id,
                    kind: match op {
                        LogicOp::And => NodeKind::And,
                        LogicOp::Or => NodeKind::Or,
                    },
                    label,
                    pre_rollback_size: pre,
                    rollbacks,
                    rows: self.rows[id].clone(),
                    empty_and,
                })
            }
        }
    }

    /// Flips left child, right child, then the node itself, one per attempt,
    /// until the node's rows are non-empty. Flips persist.
    fn and2or(&mut self, id: usize) -> Vec<RollbackEvent> {
        let (l, r) = self.children(id).expect("internal node");
        let mut targets = Vec::with_capacity(3);
        for child in [l, r] {
            if self.children(child).is_some() && self.ops[child] == Some(LogicOp::And) {
                targets.push(child);
            }
        }
        targets.push(id);
        let mut events = Vec::new();
        for t in targets {
            let before = self.rows[t].clone();
            self.ops[t] = Some(LogicOp::Or);
            if t != id {
                self.rows[t] = self.combine(t);
            }
            self.rows[id] = self.combine(id);
            events.push(RollbackEvent {
                flipped: t,
                flipped_before: before,
                flipped_after: self.rows[t].clone(),
                result: self.rows[id].clone(),
            });
            if !self.rows[id].is_empty() {
                break;
            }
        }
        events
    }
}

/// Runs the tree bottom-up in post-order. Leaves apply their evidence and
/// internal nodes merge their children. With `rollback`, an empty And node
/// is repaired by flipping And nodes to Or.
pub fn execute<'a>(
    tree: &EvidenceTree,
    table: &'a Table,
    rollback: bool,
) -> Result<(SubTable<'a>, ExecutionTrace), TreeError> {
    let flat = FlatTree::new(tree);
    let ops = flat
        .nodes
        .iter()
        .map(|n| match n {
            FlatNode::Internal { op, .. } => Some(*op),
            FlatNode::Leaf(_) => None,
        })
        .collect();
    let n = flat.len();
    let order = flat.postorder();
    let mut ex = Executor {
        flat,
        table,
        ops,
        rows: vec![Vec::new(); n],
    };
    let mut trace = ExecutionTrace::default();
    for id in order {
        let entry = ex.visit(id, rollback)?;
        trace.entries.push(entry);
    }
    let root = std::mem::take(&mut ex.rows[0]);
    Ok((SubTable::from_sorted_unchecked(table, root), trace))
}

/// Asks the verifier about `result` and falls back through an earlier
/// node's rows to the full table. At most two verifier calls.
pub fn verify_and_finalize<'a>(
    result: SubTable<'a>,
    trace: &mut ExecutionTrace,
    question: &str,
    provider: &dyn LlmProvider,
) -> SubTable<'a> {
    let table = result.source();
    if result.is_empty() {
        trace.outcome = Some(FinalOutcome::EmptyResult);
        return table.full();
    }
    let root = trace.entries.last().map_or(0, |e| e.node);
    let first = ask(&result, root, trace, question, provider);
    match first {
        None => {
            trace.outcome = Some(FinalOutcome::Unverified { node: root });
            return result;
        }
        Some(true) => {
            trace.outcome = Some(FinalOutcome::Accepted);
            return result;
        }
        Some(false) => {}
    }
    let previous = trace
        .entries
        .iter()
        .rev()
        .skip(1)
        .find(|e| !e.rows.is_empty() && e.rows != result.row_indices())
        .map(|e| (e.node, e.rows.clone()));
    let Some((node, rows)) = previous else {
        trace.outcome = Some(FinalOutcome::FullTable);
        return table.full();
    };
    let candidate = SubTable::from_sorted_unchecked(table, rows);
    match ask(&candidate, node, trace, question, provider) {
        Some(true) => {
            trace.outcome = Some(FinalOutcome::RolledBack { node });
            candidate
        }
        None => {
            trace.outcome = Some(FinalOutcome::Unverified { node });
            candidate
        }
        Some(false) => {
            trace.outcome = Some(FinalOutcome::FullTable);
            table.full()
        }
    }
}

fn ask(
    sub: &SubTable<'_>,
    node: usize,
    trace: &mut ExecutionTrace,
    question: &str,
    provider: &dyn LlmProvider,
) -> Option<bool> {
    let verdict = match verify_table(provider, &sub.render(), question) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("verifier unavailable, accepting unchecked: {e}");
            None
        }
    };
    trace.verifier.push(VerifierAttempt {
        node,
        rows: sub.row_indices().to_vec(),
        verdict,
    });
    verdict
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeSource {
    Model,
    Fallback,
}

/// How the tree was obtained, kept for the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Construction {
    pub source: TreeSource,
    pub attempts: usize,
    pub failures: Vec<String>,
}

pub fn tree_prompt(question: &str, rep: &SubTable<'_>, reliable: &ReliableEvidenceSet) -> String {
    let (header, rows) = prompt_context(rep);
    let evidence: Vec<String> = reliable.iter().map(Evidence::to_json).collect();
    prompts::render(
        prompts::TREE,
        &[
            ("header", &header),
            ("rows", &rows),
            ("question", question),
            ("evidence", &evidence.join("\n")),
        ],
    )
}

/// Why a model tree was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeRejection {
    #[error("no parseable tree in reply")]
    Parse,
    #[error("leaf {0} is not among the reliable evidence")]
    Mismatch(Evidence),
    #[error("leaf {0} is used more than once")]
    Duplicate(Evidence),
}

/// Checks every leaf against `reliable` (same column and action, equivalent
/// condition) and rewrites it to the matched member. A member may back at
/// most one leaf.
pub fn validate_tree(
    tree: EvidenceTree,
    reliable: &ReliableEvidenceSet,
    disc: &mut dyn ConditionEquivalence,
) -> Result<EvidenceTree, TreeRejection> {
    let mut used = vec![false; reliable.len()];
    fn walk(
        t: EvidenceTree,
        reliable: &ReliableEvidenceSet,
        used: &mut [bool],
        disc: &mut dyn ConditionEquivalence,
    ) -> Result<EvidenceTree, TreeRejection> {
        match t {
            EvidenceTree::Leaf { leaf } => {
                let key = leaf.group_key();
                let exact = reliable.iter().position(|r| *r == leaf);
                let found = exact.or_else(|| {
                    reliable
                        .iter()
                        .position(|r| r.group_key() == key && disc.equivalent(&r.condition, &leaf.condition))
                });
                match found {
                    None => Err(TreeRejection::Mismatch(leaf)),
                    Some(i) if used[i] => Err(TreeRejection::Duplicate(leaf)),
                    Some(i) => {
                        used[i] = true;
                        Ok(EvidenceTree::leaf(reliable.evidences[i].clone()))
                    }
                }
            }
            EvidenceTree::Internal { op, left, right } => {
                let l = walk(*left, reliable, used, disc)?;
                let r = walk(*right, reliable, used, disc)?;
                Ok(EvidenceTree::node(op, l, r))
            }
        }
    }
    walk(tree, reliable, &mut used, disc)
}

pub fn parse_tree_reply(reply: &str) -> Option<EvidenceTree> {
    serde_json::from_value(extract_json_block(reply)?).ok()
}

/// Asks the tree model, validating the reply; one regeneration, then a
/// left-deep And chain over the reliable set.
pub fn construct_tree(
    question: &str,
    rep: &SubTable<'_>,
    reliable: &ReliableEvidenceSet,
    provider: &dyn LlmProvider,
    disc: &mut dyn ConditionEquivalence,
) -> Result<(EvidenceTree, Construction), TreeError> {
    let fallback = EvidenceTree::and_chain(&reliable.evidences).ok_or(TreeError::NoEvidence)?;
    let prompt = tree_prompt(question, rep, reliable);
    let mut failures = Vec::new();
    for attempt in 1..=2 {
        let outcome = match provider.complete(Role::Tree, &prompt) {
            Ok(reply) => parse_tree_reply(&reply)
                .ok_or(TreeRejection::Parse)
                .and_then(|t| validate_tree(t, reliable, disc))
                .map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(tree) => {
                return Ok((
                    tree,
                    Construction {
                        source: TreeSource::Model,
                        attempts: attempt,
                        failures,
                    },
                ))
            }
            Err(msg) => {
                debug!(attempt, "tree rejected: {msg}");
                failures.push(msg);
            }
        }
    }
    Ok((
        fallback,
        Construction {
            source: TreeSource::Fallback,
            attempts: 2,
            failures,
        },
    ))
}
