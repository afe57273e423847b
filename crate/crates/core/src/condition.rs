//! Evidence conditions: parsing free-form condition text into typed
//! predicates and evaluating them against cells.
//!
//! Grammar: an optional leading operator followed by one value, or two
//! values for `between X and Y`. Operators are `== != < <= > >=` and the
//! words `before after on between in contains`. When no operator is given
//! the default is `contains` for string matching, `==` for numbers and `on`
//! for dates.

use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{bare_year, collapse_whitespace, format_number, parse_date, parse_number, Cell, CellValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    StringMatch,
    NumericCompare,
    DateEval,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::StringMatch, Action::NumericCompare, Action::DateEval];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::StringMatch => "string_match",
            Action::NumericCompare => "numeric_compare",
            Action::DateEval => "date_eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s.trim())
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse condition {condition:?} as {action}: {reason}")]
pub struct UnparsableCondition {
    pub condition: String,
    pub action: Action,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StringMode {
    Equals,
    Contains,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericOp {
    Eq(f64),
    Ne(f64),
    Lt(f64),
    Le(f64),
    Gt(f64),
    Ge(f64),
    /// Inclusive; low <= high.
    Between(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateOp {
    On(NaiveDate),
    Before(NaiveDate),
    After(NaiveDate),
    /// Inclusive; low <= high.
    Between(NaiveDate, NaiveDate),
    YearEquals(i32),
}

/// Executable form of an evidence condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    StringMatch { mode: StringMode, needle: String },
    NumericCompare(NumericOp),
    DateEval(DateOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operator {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Before,
    After,
    On,
    Between,
    In,
    Contains,
}

const SYMBOLS: &[(&str, Operator)] = &[
    ("==", Operator::Eq),
    ("!=", Operator::Ne),
    ("<=", Operator::Le),
    (">=", Operator::Ge),
    ("<", Operator::Lt),
    (">", Operator::Gt),
];

const WORDS: &[(&str, Operator)] = &[
    ("before", Operator::Before),
    ("after", Operator::After),
    ("on", Operator::On),
    ("between", Operator::Between),
    ("in", Operator::In),
    ("contains", Operator::Contains),
];

/// Splits an optional leading operator off the condition.
fn split_operator(text: &str) -> (Option<Operator>, &str) {
    for (sym, op) in SYMBOLS {
        if let Some(rest) = text.strip_prefix(sym) {
            return (Some(*op), rest.trim_start());
        }
    }
    for (word, op) in WORDS {
        if text.len() > word.len()
            && text.is_char_boundary(word.len())
            && text[..word.len()].eq_ignore_ascii_case(word)
            && text[word.len()..].starts_with(char::is_whitespace)
        {
            return (Some(*op), text[word.len()..].trim_start());
        }
    }
    (None, text)
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('`', '`'), ('“', '”')] {
        if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

/// Splits `X and Y` for `between`.
fn split_between(rest: &str) -> Option<(&str, &str)> {
    let lower = rest.to_ascii_lowercase();
    let idx = lower.find(" and ")?;
    let (a, b) = (&rest[..idx], &rest[idx + 5..]);
    let (a, b) = (strip_quotes(a), strip_quotes(b));
    (!a.is_empty() && !b.is_empty()).then_some((a, b))
}

/// Normalization applied to both needles and cell text before string matching.
pub fn normalize_text(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}

pub fn parse_condition(condition: &str, action: Action) -> Result<Predicate, UnparsableCondition> {
    let fail = |reason: &str| UnparsableCondition {
        condition: condition.to_string(),
        action,
        reason: reason.to_string(),
    };
    let text = collapse_whitespace(condition);
    if text.is_empty() {
        return Err(fail("empty condition"));
    }
    let (op, rest) = split_operator(&text);
    match action {
        Action::StringMatch => {
            let mode = match op {
                None | Some(Operator::Contains) => StringMode::Contains,
                Some(Operator::Eq) | Some(Operator::In) => StringMode::Equals,
                Some(_) => return Err(fail("operator not supported for string matching")),
            };
            let needle = normalize_text(strip_quotes(rest));
            if needle.is_empty() {
                return Err(fail("empty match value"));
            }
            Ok(Predicate::StringMatch { mode, needle })
        }
        Action::NumericCompare => {
            let num = |s: &str| parse_number(strip_quotes(s)).ok_or_else(|| fail("not a number"));
            let op = match op {
                None | Some(Operator::Eq) | Some(Operator::In) | Some(Operator::On) => NumericOp::Eq(num(rest)?),
                Some(Operator::Ne) => NumericOp::Ne(num(rest)?),
                Some(Operator::Lt) => NumericOp::Lt(num(rest)?),
                Some(Operator::Le) => NumericOp::Le(num(rest)?),
                Some(Operator::Gt) => NumericOp::Gt(num(rest)?),
                Some(Operator::Ge) => NumericOp::Ge(num(rest)?),
                Some(Operator::Between) => {
                    let (a, b) = split_between(rest).ok_or_else(|| fail("between needs `X and Y`"))?;
                    let (a, b) = (num(a)?, num(b)?);
                    NumericOp::Between(a.min(b), a.max(b))
                }
                Some(_) => return Err(fail("operator not supported for numeric comparison")),
            };
            Ok(Predicate::NumericCompare(op))
        }
        Action::DateEval => {
            let date = |s: &str| parse_date(strip_quotes(s)).ok_or_else(|| fail("not a date"));
            let year = |s: &str| bare_year(strip_quotes(s));
            let op = match op {
                None | Some(Operator::On) | Some(Operator::Eq) | Some(Operator::In) => match year(rest) {
                    Some(y) => DateOp::YearEquals(y),
                    None => DateOp::On(date(rest)?),
                },
                Some(Operator::Before) | Some(Operator::Lt) => DateOp::Before(date(rest)?),
                Some(Operator::After) | Some(Operator::Gt) => match year(rest) {
                    Some(y) => DateOp::After(last_day_of_year(y).ok_or_else(|| fail("year out of range"))?),
                    None => DateOp::After(date(rest)?),
                },
                Some(Operator::Between) => {
                    let (a, b) = split_between(rest).ok_or_else(|| fail("between needs `X and Y`"))?;
                    let lo = date(a)?;
                    let hi = match year(b) {
                        Some(y) => last_day_of_year(y).ok_or_else(|| fail("year out of range"))?,
                        None => date(b)?,
                    };
                    if lo <= hi {
                        DateOp::Between(lo, hi)
                    } else {
                        // reversed bounds: re-read with the roles swapped
                        let lo = date(b)?;
                        let hi = match year(a) {
                            Some(y) => last_day_of_year(y).ok_or_else(|| fail("year out of range"))?,
                            None => date(a)?,
                        };
                        DateOp::Between(lo.min(hi), lo.max(hi))
                    }
                }
                Some(_) => return Err(fail("operator not supported for date evaluation")),
            };
            Ok(Predicate::DateEval(op))
        }
    }
}

fn last_day_of_year(year: i32) -> Option<NaiveDate> {
    NaiveDate::from_ymd_opt(year, 12, 31)
}

fn fmt_date(d: &NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

impl Predicate {
    pub fn action(&self) -> Action {
        match self {
            Predicate::StringMatch { .. } => Action::StringMatch,
            Predicate::NumericCompare(_) => Action::NumericCompare,
            Predicate::DateEval(_) => Action::DateEval,
        }
    }

    /// Condition text in canonical form; parses back to `self`.
    pub fn condition_text(&self) -> String {
        match self {
            Predicate::StringMatch {
                mode: StringMode::Contains,
                needle,
            } => format!("contains {needle}"),
            Predicate::StringMatch {
                mode: StringMode::Equals,
                needle,
            } => format!("== {needle}"),
            Predicate::NumericCompare(op) => match op {
                NumericOp::Eq(x) => format!("== {}", format_number(*x)),
                NumericOp::Ne(x) => format!("!= {}", format_number(*x)),
                NumericOp::Lt(x) => format!("< {}", format_number(*x)),
                NumericOp::Le(x) => format!("<= {}", format_number(*x)),
                NumericOp::Gt(x) => format!("> {}", format_number(*x)),
                NumericOp::Ge(x) => format!(">= {}", format_number(*x)),
                NumericOp::Between(a, b) => format!("between {} and {}", format_number(*a), format_number(*b)),
            },
            Predicate::DateEval(op) => match op {
                DateOp::On(d) => format!("on {}", fmt_date(d)),
                DateOp::Before(d) => format!("before {}", fmt_date(d)),
                DateOp::After(d) => format!("after {}", fmt_date(d)),
                DateOp::Between(a, b) => format!("between {} and {}", fmt_date(a), fmt_date(b)),
                DateOp::YearEquals(y) => format!("on {y:04}"),
            },
        }
    }

    /// Evaluates against one cell. Type mismatches evaluate to false.
    pub fn eval(&self, cell: &Cell) -> bool {
        match self {
            Predicate::StringMatch { mode, needle } => {
                let hay = normalize_text(cell.raw());
                match mode {
                    StringMode::Equals => hay == *needle,
                    StringMode::Contains => hay.contains(needle.as_str()),
                }
            }
            Predicate::NumericCompare(op) => {
                let Some(x) = cell.value().as_number() else {
                    return false;
                };
                match *op {
                    NumericOp::Eq(v) => x == v,
                    NumericOp::Ne(v) => x != v,
                    NumericOp::Lt(v) => x < v,
                    NumericOp::Le(v) => x <= v,
                    NumericOp::Gt(v) => x > v,
                    NumericOp::Ge(v) => x >= v,
                    NumericOp::Between(lo, hi) => x >= lo && x <= hi,
                }
            }
            Predicate::DateEval(op) => {
                let value = cell.value();
                if let DateOp::YearEquals(y) = op {
                    return value.year() == Some(*y);
                }
                let Some(d) = date_of(value) else {
                    return false;
                };
                match *op {
                    DateOp::On(v) => d == v,
                    DateOp::Before(v) => d < v,
                    DateOp::After(v) => d > v,
                    DateOp::Between(lo, hi) => d >= lo && d <= hi,
                    DateOp::YearEquals(_) => unreachable!(),
                }
            }
        }
    }
}

fn date_of(value: &CellValue) -> Option<NaiveDate> {
    value.as_date().filter(|d| d.year() > 0)
}

/// `action(condition)`, e.g. `numeric_compare(> 200000)`.
impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.action(), self.condition_text())
    }
}

pub fn eval_predicate(pred: &Predicate, cell: &Cell) -> bool {
    pred.eval(cell)
}
