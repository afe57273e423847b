//! Typed tables, row subsets and token accounting.
//!
//! A [`Table`] is immutable once built. Pruning never copies cells; it
//! produces a [`SubTable`], an ordered set of row indices borrowed against
//! its source table.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::sync::LazyLock;

use chrono::{Datelike, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator between cells in the canonical serialization.
pub const CELL_SEPARATOR: &str = " | ";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("duplicate header {0:?} cannot be disambiguated")]
    DuplicateHeaderUnresolvable(String),
    #[error("row index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("sub-tables come from different source tables")]
    SourceMismatch,
    #[error("invalid token counts: entire={entire}, pruned={pruned}")]
    InvalidCounts { entire: usize, pruned: usize },
}

/// Input formats understood by [`parse_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    /// One JSON object per line; keys are column names.
    RecordsPerLine,
}

impl TableFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => TableFormat::RecordsPerLine,
            _ => TableFormat::Csv,
        }
    }
}

/// Typed interpretation of a cell's raw text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum CellValue {
    Text(String),
    Number(f64),
    Date(NaiveDate),
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    raw: String,
    parsed: CellValue,
}

impl Cell {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let parsed = parse_cell_value(&raw);
        Self { raw, parsed }
    }

    pub fn empty() -> Self {
        Self::new("")
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn value(&self) -> &CellValue {
        &self.parsed
    }

    /// Canonical rendering of the parsed value. Numbers and dates re-parse
    /// to the same value.
    pub fn canonical(&self) -> String {
        match &self.parsed {
            CellValue::Text(t) => t.clone(),
            CellValue::Number(n) => format_number(*n),
            CellValue::Date(d) => d.format("%Y-%m-%d").to_string(),
            CellValue::Empty => String::new(),
        }
    }
}

pub(crate) fn format_number(n: f64) -> String {
    if n == 0.0 {
        // avoid "-0"
        return "0".to_string();
    }
    format!("{n}")
}

static PLAIN_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?(\d+(\.\d*)?|\.\d+)$").unwrap());
static GROUPED_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[+-]?\d{1,3}(,\d{3})+(\.\d+)?$").unwrap());
static BARE_YEAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d{4}$").unwrap());

const CURRENCY_SYMBOLS: &[char] = &['$', '€', '£', '¥', '₹', '₪'];

/// Parses a decimal number, accepting thousands separators and a single
/// leading currency symbol.
pub fn parse_number(text: &str) -> Option<f64> {
    let mut s = text.trim();
    let mut sign = "";
    if let Some(rest) = s.strip_prefix('-') {
        sign = "-";
        s = rest;
    }
    if let Some(first) = s.chars().next() {
        if CURRENCY_SYMBOLS.contains(&first) {
            s = &s[first.len_utf8()..];
        }
    }
    let s = s.trim_start();
    let cleaned = if GROUPED_NUMBER.is_match(s) {
        s.replace(',', "")
    } else if PLAIN_NUMBER.is_match(s) {
        s.to_string()
    } else {
        return None;
    };
    let value: f64 = format!("{sign}{cleaned}").parse().ok()?;
    value.is_finite().then_some(value)
}

/// Parses the accepted calendar-date formats. A bare four-digit year maps to
/// January 1 of that year.
pub fn parse_date(text: &str) -> Option<NaiveDate> {
    let s = collapse_whitespace(text);
    if s.is_empty() {
        return None;
    }
    if BARE_YEAR.is_match(&s) {
        let year: i32 = s.parse().ok()?;
        return NaiveDate::from_ymd_opt(year, 1, 1);
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d", "%B %d, %Y", "%B %d %Y", "%d %B %Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(&s, fmt) {
            return Some(d);
        }
    }
    None
}

/// Returns the year if `text` is a bare four-digit year.
pub(crate) fn bare_year(text: &str) -> Option<i32> {
    let s = text.trim();
    BARE_YEAR.is_match(s).then(|| s.parse().ok()).flatten()
}

fn parse_cell_value(raw: &str) -> CellValue {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return CellValue::Empty;
    }
    if let Some(n) = parse_number(trimmed) {
        return CellValue::Number(n);
    }
    if let Some(d) = parse_date(trimmed) {
        return CellValue::Date(d);
    }
    CellValue::Text(trimmed.to_string())
}

impl CellValue {
    /// Date view of the value. Whole-number years in 1000..=9999 count as
    /// January 1 of that year.
    pub fn as_date(&self) -> Option<NaiveDate> {
        match self {
            CellValue::Date(d) => Some(*d),
            CellValue::Number(n) if n.fract() == 0.0 && (1000.0..=9999.0).contains(n) => {
                NaiveDate::from_ymd_opt(*n as i32, 1, 1)
            }
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            CellValue::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn year(&self) -> Option<i32> {
        self.as_date().map(|d| d.year())
    }
}

/// Trims and collapses internal whitespace runs to a single space.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Key used for case-insensitive column lookup.
pub fn column_key(name: &str) -> String {
    collapse_whitespace(name).to_lowercase()
}

/// Non-fatal issues found while parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseWarning {
    /// Row (0-based, body rows) had fewer cells than headers.
    PaddedRow { row: usize, found: usize, expected: usize },
    /// Row had more cells than headers; the excess was dropped.
    TruncatedRow { row: usize, found: usize, expected: usize },
    /// Header renamed during normalization.
    RenamedHeader { column: usize, from: String, to: String },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::PaddedRow { row, found, expected } => {
                write!(
                    f,
                    "row {row}: {found} cells for {expected} headers, padded with empty cells"
                )
            }
            ParseWarning::TruncatedRow { row, found, expected } => {
                write!(
                    f,
                    "row {row}: {found} cells for {expected} headers, extra cells dropped"
                )
            }
            ParseWarning::RenamedHeader { column, from, to } => {
                write!(f, "column {column}: header {from:?} renamed to {to:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Builds a table from raw header and row strings, applying header
    /// normalization and the padding/truncation rule.
    pub fn from_strings<H, R, C>(
        name: impl Into<String>,
        headers: H,
        rows: R,
    ) -> Result<(Self, Vec<ParseWarning>), TableError>
    where
        H: IntoIterator,
        H::Item: AsRef<str>,
        R: IntoIterator<Item = C>,
        C: IntoIterator,
        C::Item: AsRef<str>,
    {
        let raw_headers: Vec<String> = headers.into_iter().map(|h| h.as_ref().to_string()).collect();
        if raw_headers.is_empty() {
            return Err(TableError::MalformedInput("zero columns".into()));
        }
        let mut warnings = Vec::new();
        let headers = normalize_headers(&raw_headers, &mut warnings)?;
        let width = headers.len();
        let mut out_rows = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            let mut cells: Vec<Cell> = row.into_iter().map(|c| Cell::new(c.as_ref())).collect();
            let found = cells.len();
            if found < width {
                warnings.push(ParseWarning::PaddedRow {
                    row: i,
                    found,
                    expected: width,
                });
                cells.resize_with(width, Cell::empty);
            } else if found > width {
                warnings.push(ParseWarning::TruncatedRow {
                    row: i,
                    found,
                    expected: width,
                });
                cells.truncate(width);
            }
            out_rows.push(cells);
        }
        Ok((
            Self {
                name: name.into(),
                headers,
                rows: out_rows,
            },
            warnings,
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> Option<&[Cell]> {
        self.rows.get(index).map(|r| r.as_slice())
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.headers.len()
    }

    /// Resolves a column name: whitespace-normalized, case-insensitive, exact.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        let key = column_key(name);
        self.headers.iter().position(|h| column_key(h) == key)
    }

    /// Sub-table covering every row.
    pub fn full(&self) -> SubTable<'_> {
        SubTable {
            source: self,
            rows: (0..self.rows.len()).collect(),
        }
    }

    /// Canonical ` | ` serialization: header line then one line per row.
    pub fn render(&self) -> String {
        render_rows(self, 0..self.rows.len())
    }

    pub fn count_tokens(&self) -> usize {
        count_tokens(&self.render())
    }

    /// Writes the table back out as CSV.
    pub fn to_csv(&self) -> Result<String, TableError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| TableError::MalformedInput(e.to_string());
        wtr.write_record(&self.headers).map_err(io)?;
        for row in &self.rows {
            wtr.write_record(row.iter().map(|c| c.raw())).map_err(io)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| TableError::MalformedInput(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| TableError::MalformedInput(e.to_string()))
    }
}

fn normalize_headers(raw: &[String], warnings: &mut Vec<ParseWarning>) -> Result<Vec<String>, TableError> {
    let base: Vec<String> = raw.iter().map(|h| collapse_whitespace(h)).collect();
    let literal_keys: HashSet<String> = base.iter().map(|h| h.to_lowercase()).collect();
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(base.len());
    for (col, name) in base.iter().enumerate() {
        let key = name.to_lowercase();
        let final_name = if seen.contains(&key) {
            let mut n = 2;
            loop {
                let candidate = format!("{name}#{n}");
                let ckey = candidate.to_lowercase();
                if !seen.contains(&ckey) {
                    if literal_keys.contains(&ckey) {
                        return Err(TableError::DuplicateHeaderUnresolvable(name.clone()));
                    }
                    break candidate;
                }
                n += 1;
            }
        } else {
            name.clone()
        };
        if final_name != raw[col] {
            warnings.push(ParseWarning::RenamedHeader {
                column: col,
                from: raw[col].clone(),
                to: final_name.clone(),
            });
        }
        seen.insert(final_name.to_lowercase());
        out.push(final_name);
    }
    Ok(out)
}

/// Parses a table from bytes. The returned warnings list padded or truncated
/// rows and renamed headers.
pub fn parse_table(
    name: impl Into<String>,
    input: &[u8],
    format: TableFormat,
) -> Result<(Table, Vec<ParseWarning>), TableError> {
    match format {
        TableFormat::Csv => parse_csv(name.into(), input),
        TableFormat::RecordsPerLine => parse_records(name.into(), input),
    }
}

/// Reads a table from disk, picking the format from the extension.
pub fn load_table(path: &std::path::Path) -> Result<(Table, Vec<ParseWarning>), TableError> {
    let bytes = std::fs::read(path).map_err(|e| TableError::MalformedInput(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table").to_string();
    parse_table(name, &bytes, TableFormat::from_path(path))
}

fn parse_csv(name: String, input: &[u8]) -> Result<(Table, Vec<ParseWarning>), TableError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_err)?,
        None => return Err(TableError::MalformedInput("zero columns".into())),
    };
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(TableError::MalformedInput("zero columns".into()));
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        rows.push(record.iter().map(str::to_string).collect::<Vec<_>>());
    }
    Table::from_strings(name, header.iter(), rows)
}

fn csv_err(e: csv::Error) -> TableError {
    TableError::MalformedInput(e.to_string())
}

fn parse_records(name: String, input: &[u8]) -> Result<(Table, Vec<ParseWarning>), TableError> {
    let mut headers: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    let mut extra_warnings = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| TableError::MalformedInput(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| TableError::MalformedInput(format!("line {}: {e}", lineno + 1)))?;
        let obj = value
            .as_object()
            .ok_or_else(|| TableError::MalformedInput(format!("line {}: not an object", lineno + 1)))?;
        let hdrs = headers.get_or_insert_with(|| obj.keys().cloned().collect());
        let row_idx = rows.len();
        let mut row = Vec::with_capacity(hdrs.len());
        let mut missing = 0;
        for h in hdrs.iter() {
            match obj.get(h) {
                Some(v) => row.push(json_to_cell_text(v)),
                None => {
                    missing += 1;
                    row.push(String::new());
                }
            }
        }
        let extra = obj.keys().filter(|k| !hdrs.contains(k)).count();
        if missing > 0 {
            extra_warnings.push(ParseWarning::PaddedRow {
                row: row_idx,
                found: hdrs.len() - missing,
                expected: hdrs.len(),
            });
        }
        if extra > 0 {
            extra_warnings.push(ParseWarning::TruncatedRow {
                row: row_idx,
                found: hdrs.len() - missing + extra,
                expected: hdrs.len(),
            });
        }
        rows.push(row);
    }
    let headers = headers.ok_or_else(|| TableError::MalformedInput("zero columns".into()))?;
    let (table, mut warnings) = Table::from_strings(name, headers, rows)?;
    warnings.extend(extra_warnings);
    Ok((table, warnings))
}

fn json_to_cell_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Ordered, duplicate-free set of row indices into a source table.
#[derive(Clone)]
pub struct SubTable<'a> {
    source: &'a Table,
    rows: Vec<usize>,
}

impl fmt::Debug for SubTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubTable")
            .field("source", &self.source.name)
            .field("rows", &self.rows)
            .finish()
    }
}

impl PartialEq for SubTable<'_> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.source, other.source) && self.rows == other.rows
    }
}

impl<'a> SubTable<'a> {
    pub fn source(&self) -> &'a Table {
        self.source
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn same_source(&self, other: &SubTable<'_>) -> bool {
        std::ptr::eq(self.source, other.source)
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [Cell]> + '_ {
        self.rows.iter().map(|&i| self.source.rows[i].as_slice())
    }

    pub fn render(&self) -> String {
        render_rows(self.source, self.rows.iter().copied())
    }

    pub fn count_tokens(&self) -> usize {
        count_tokens(&self.render())
    }

    /// Materializes the selected rows as a standalone table.
    pub fn to_table(&self) -> Table {
        Table {
            name: self.source.name.clone(),
            headers: self.source.headers.clone(),
            rows: self.rows.iter().map(|&i| self.source.rows[i].clone()).collect(),
        }
    }

    /// Builds a sub-table from indices already known to be sorted, unique
    /// and in range.
    pub(crate) fn from_sorted_unchecked(source: &'a Table, rows: Vec<usize>) -> Self {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(rows.last().is_none_or(|&i| i < source.num_rows()));
        Self { source, rows }
    }
}

/// Selects rows by index. Indices are deduplicated and sorted so the result
/// keeps the table's original row order.
pub fn subtable<'a>(table: &'a Table, indices: &[usize]) -> Result<SubTable<'a>, TableError> {
    let n = table.num_rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(TableError::IndexOutOfRange { index: bad, rows: n });
    }
    let mut rows = indices.to_vec();
    rows.sort_unstable();
    rows.dedup();
    Ok(SubTable { source: table, rows })
}

fn render_rows(table: &Table, rows: impl IntoIterator<Item = usize>) -> String {
    let mut out = table.headers.join(CELL_SEPARATOR);
    for i in rows {
        out.push('\n');
        let line = table.rows[i]
            .iter()
            .map(|c| c.raw().trim())
            .collect::<Vec<_>>()
            .join(CELL_SEPARATOR);
        out.push_str(&line);
    }
    out
}

/// Tokens are maximal runs of non-whitespace characters.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Percentage of tokens removed by pruning, rounded half-up to one decimal.
pub fn compression_rate(entire_tokens: usize, pruned_tokens: usize) -> Result<f64, TableError> {
    if entire_tokens == 0 || pruned_tokens > entire_tokens {
        return Err(TableError::InvalidCounts {
            entire: entire_tokens,
            pruned: pruned_tokens,
        });
    }
    // Exact integer arithmetic in tenths of a percent.
    let removed = (entire_tokens - pruned_tokens) as u128;
    let entire = entire_tokens as u128;
    let tenths = (2000 * removed + entire) / (2 * entire);
    Ok(tenths as f64 / 10.0)
}
