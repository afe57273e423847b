//! Grounding toolkit: applies evidence to tables, checks usability, and
//! merges child sub-tables at tree nodes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::{parse_condition, Action, UnparsableCondition};
use crate::table::{column_key, SubTable, Table};

/// One minimal semantic unit of a question, grounded in a column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Evidence {
    pub area: String,
    pub condition: String,
    pub action: Action,
}

impl Evidence {
    pub fn new(area: impl Into<String>, condition: impl Into<String>, action: Action) -> Self {
        Self {
            area: area.into(),
            condition: condition.into(),
            action,
        }
    }

    /// Grouping key for consistency assessment: normalized area plus action.
    pub fn group_key(&self) -> (String, Action) {
        (column_key(&self.area), self.action)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("evidence serializes")
    }
}

impl fmt::Display for Evidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.area, self.condition, self.action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolkitError {
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error(transparent)]
    Unparsable(#[from] UnparsableCondition),
    #[error("sub-tables come from different source tables")]
    SourceMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicOp {
    And,
    Or,
}

impl fmt::Display for LogicOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogicOp::And => "and",
            LogicOp::Or => "or",
        })
    }
}

/// Rows of `table` whose `e.area` cell satisfies the evidence condition, in
/// table order.
pub fn apply_evidence<'a>(table: &'a Table, e: &Evidence) -> Result<SubTable<'a>, ToolkitError> {
    let col = table
        .column_index(&e.area)
        .ok_or_else(|| ToolkitError::UnknownColumn(e.area.clone()))?;
    let pred = parse_condition(&e.condition, e.action)?;
    let rows = table
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, row)| pred.eval(&row[col]))
        .map(|(i, _)| i)
        .collect();
    Ok(SubTable::from_sorted_unchecked(table, rows))
}

/// True iff the evidence grounds to at least one row. Every failure,
/// whatever its cause, counts as unusable.
pub fn check_usability(table: &Table, e: &Evidence) -> bool {
    apply_evidence(table, e).is_ok_and(|s| !s.is_empty())
}

/// And: intersection of row sets. Or: union. Result stays sorted.
pub fn merge<'a>(left: &SubTable<'a>, right: &SubTable<'a>, op: LogicOp) -> Result<SubTable<'a>, ToolkitError> {
    if !left.same_source(right) {
        return Err(ToolkitError::SourceMismatch);
    }
    let rows = merge_sorted(left.row_indices(), right.row_indices(), op);
    Ok(SubTable::from_sorted_unchecked(left.source(), rows))
}

/// Linear merge of two ascending, duplicate-free index lists.
pub(crate) fn merge_sorted(a: &[usize], b: &[usize], op: LogicOp) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(match op {
        LogicOp::And => a.len().min(b.len()),
        LogicOp::Or => a.len() + b.len(),
    });
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                if op == LogicOp::Or {
                    out.push(a[i]);
                }
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                if op == LogicOp::Or {
                    out.push(b[j]);
                }
                j += 1;
            }
        }
    }
    if op == LogicOp::Or {
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::subtable;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn demo() -> Table {
        Table::from_strings(
            "demo",
            ["City", "District", "Population", "Founded"],
            vec![
                vec!["Tel Aviv", "Tel Aviv", "451523", "1909-04-11"],
                vec!["Holon", "Tel Aviv", "188834", "1940-01-01"],
                vec!["Haifa", "Haifa", "285316", "1853-01-01"],
            ],
        )
        .unwrap()
        .0
    }

    /// Linear scan that re-derives matching rows cell by cell.
    fn scan(table: &Table, col: &str, keep: impl Fn(&str) -> bool) -> Vec<usize> {
        let c = table.headers().iter().position(|h| h == col).unwrap();
        (0..table.num_rows())
            .filter(|&i| keep(table.rows()[i][c].raw()))
            .collect()
    }

    #[test]
    fn apply_examples() {
        let t = demo();
        let e = Evidence::new("District", "Tel Aviv", Action::StringMatch);
        assert_eq!(
            apply_evidence(&t, &e).unwrap().row_indices(),
            scan(&t, "District", |s| s == "Tel Aviv")
        );
        assert_eq!(apply_evidence(&t, &e).unwrap().row_indices(), [0, 1]);

        let e = Evidence::new("Population", "> 200000", Action::NumericCompare);
        let expected = scan(&t, "Population", |s| s.parse::<f64>().unwrap() > 200000.0);
        assert_eq!(apply_evidence(&t, &e).unwrap().row_indices(), expected);
        assert_eq!(expected, [0, 2]);

        let e = Evidence::new("District", "Jerusalem", Action::StringMatch);
        assert!(apply_evidence(&t, &e).unwrap().is_empty());
    }

    #[test]
    fn column_resolution_is_case_and_space_insensitive() {
        let t = demo();
        let e = Evidence::new("  district ", "haifa", Action::StringMatch);
        assert_eq!(apply_evidence(&t, &e).unwrap().row_indices(), [2]);
        let e = Evidence::new("Distrct", "haifa", Action::StringMatch);
        assert_eq!(
            apply_evidence(&t, &e).unwrap_err(),
            ToolkitError::UnknownColumn("Distrct".into())
        );
    }

    #[test]
    fn usability_examples() {
        let t = demo();
        assert!(check_usability(
            &t,
            &Evidence::new("District", "Tel Aviv", Action::StringMatch)
        ));
        assert!(!check_usability(
            &t,
            &Evidence::new("Continent", "Europe", Action::StringMatch)
        ));
        assert!(!check_usability(
            &t,
            &Evidence::new("District", "in cycle 4", Action::StringMatch)
        ));
        assert!(!check_usability(
            &t,
            &Evidence::new("Population", "lots", Action::NumericCompare)
        ));
    }

    #[test]
    fn merge_examples() {
        let t = demo();
        let a = subtable(&t, &[0, 1]).unwrap();
        let b = subtable(&t, &[0, 2]).unwrap();
        assert_eq!(merge(&a, &b, LogicOp::And).unwrap().row_indices(), [0]);
        assert_eq!(merge(&a, &b, LogicOp::Or).unwrap().row_indices(), [0, 1, 2]);
        let empty = subtable(&t, &[]).unwrap();
        let one = subtable(&t, &[1]).unwrap();
        assert!(merge(&empty, &one, LogicOp::And).unwrap().is_empty());

        let other = demo();
        let c = subtable(&other, &[0]).unwrap();
        assert_eq!(merge(&a, &c, LogicOp::Or).unwrap_err(), ToolkitError::SourceMismatch);
    }

    #[test]
    fn evidence_json_shape() {
        let e = Evidence::new("District", "Tel Aviv", Action::StringMatch);
        assert_eq!(
            e.to_json(),
            r#"{"area":"District","condition":"Tel Aviv","action":"string_match"}"#
        );
        let back: Evidence = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(back, e);
    }

    fn small_table() -> impl Strategy<Value = Table> {
        (1usize..=12).prop_flat_map(|n| {
            proptest::collection::vec(
                (
                    prop_oneof!["[ab]{1,2}", (0i32..10).prop_map(|x| x.to_string())],
                    0i32..10,
                ),
                n,
            )
            .prop_map(|rows| {
                Table::from_strings("r", ["S", "N"], rows.into_iter().map(|(s, n)| vec![s, n.to_string()]))
                    .unwrap()
                    .0
            })
        })
    }

    proptest! {
        #[test]
        fn merge_matches_set_algebra(a in proptest::collection::btree_set(0usize..30, 0..15),
                                     b in proptest::collection::btree_set(0usize..30, 0..15)) {
            let av: Vec<_> = a.iter().copied().collect();
            let bv: Vec<_> = b.iter().copied().collect();
            let and = merge_sorted(&av, &bv, LogicOp::And);
            let or = merge_sorted(&av, &bv, LogicOp::Or);
            prop_assert_eq!(&and, &a.intersection(&b).copied().collect::<Vec<_>>());
            prop_assert_eq!(&or, &a.union(&b).copied().collect::<Vec<_>>());
            let and_set: BTreeSet<_> = and.into_iter().collect();
            let or_set: BTreeSet<_> = or.into_iter().collect();
            prop_assert!(and_set.is_subset(&or_set));
        }

        #[test]
        fn usability_agrees_with_brute_force(t in small_table(), threshold in 0i32..10, needle in "[ab]") {
            let numeric = Evidence::new("N", format!(">= {threshold}"), Action::NumericCompare);
            let brute = t.rows().iter().filter(|r| r[1].raw().parse::<i32>().unwrap() >= threshold).count();
            prop_assert_eq!(check_usability(&t, &numeric), brute >= 1);
            let sub = apply_evidence(&t, &numeric).unwrap();
            prop_assert_eq!(sub.len(), brute);

            let text = Evidence::new("S", needle.clone(), Action::StringMatch);
            let brute = t.rows().iter().filter(|r| r[0].raw().contains(needle.as_str())).count();
            prop_assert_eq!(check_usability(&t, &text), brute >= 1);
            // idempotent
            let once = apply_evidence(&t, &text).unwrap();
            let narrowed = once.to_table();
            let twice = apply_evidence(&narrowed, &text).unwrap();
            prop_assert_eq!(once.len(), twice.len());
        }
    }
}
