//! CSV report files: RFC-4180 bytes (CRLF, quoted text, 17-significant-digit
//! floats with '.' decimals), a leading `#` metadata comment block, atomic
//! write-then-rename, and a parser that inverts the writer exactly so round
//! trips can be asserted cell for cell.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Column set shared by every experiment report; per-experiment meaning of
/// the overloadable columns is documented in docs/schemas.md.
pub const COLUMNS: [&str; 10] = [
    "experiment",
    "lambda",
    "R",
    "r",
    "epsilon",
    "replicas",
    "statistic",
    "value",
    "stderr",
    "seed",
];

/// One typed cell. Text is always emitted quoted, numbers and counts bare,
/// so parsing recovers the exact type.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Number(f64),
    Count(u64),
    Empty,
}

impl From<&str> for Cell {
    fn from(s: &str) -> Cell {
        Cell::Text(s.to_string())
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Cell {
        Cell::Number(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Cell {
        Cell::Count(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> CsvTable {
        CsvTable { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn with_standard_columns() -> CsvTable {
        CsvTable::new(COLUMNS)
    }

    /// Append a row after checking arity and rejecting non-finite numbers;
    /// no NaN ever reaches a report.
    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        for (cell, column) in row.iter().zip(&self.columns) {
            if let Cell::Number(v) = cell {
                if !v.is_finite() {
                    return Err(Error::invalid(format!(
                        "non-finite value {v} in column '{column}'"
                    )));
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }
}

/// 17 significant digits: enough for an exact f64 round trip, '.' decimal
/// separator by construction.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn quote_text(out: &mut String, text: &str) {
    out.push('"');
    for ch in text.chars() {
        if ch == '"' {
            out.push('"');
        }
        out.push(ch);
    }
    out.push('"');
}

fn render_cell(out: &mut String, cell: &Cell) -> Result<()> {
    match cell {
        Cell::Text(s) => quote_text(out, s),
        Cell::Number(v) => {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite value {v} in a report row")));
            }
            let _ = write!(out, "{v:.16e}");
        }
        Cell::Count(n) => {
            let _ = write!(out, "{n}");
        }
        Cell::Empty => {}
    }
    Ok(())
}

/// Render the full file: metadata comment lines, header, rows, CRLF endings.
pub fn render(table: &CsvTable, metadata: &[String]) -> Result<String> {
    let mut out = String::new();
    for line in metadata {
        if line.contains('\n') || line.contains('\r') {
            return Err(Error::invalid("metadata lines must not contain line breaks".to_string()));
        }
        out.push_str("# ");
        out.push_str(line);
        out.push_str("\r\n");
    }
    for (k, column) in table.columns.iter().enumerate() {
        if k > 0 {
            out.push(',');
        }
        quote_text(&mut out, column);
    }
    out.push_str("\r\n");
    for row in &table.rows {
        if row.len() != table.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} cells for {} columns",
                row.len(),
                table.columns.len()
            )));
        }
        for (k, cell) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            render_cell(&mut out, cell)?;
        }
        out.push_str("\r\n");
    }
    Ok(out)
}

/// Write the report atomically: render to a sibling temp file, then rename
/// over the target, so a failed run never leaves a truncated CSV behind.
pub fn emit_csv(table: &CsvTable, metadata: &[String], path: &Path) -> Result<()> {
    let body = render(table, metadata)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path '{}' has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    let ctx = |e: std::io::Error| Error::io(path.display().to_string(), e);
    std::fs::write(&tmp, body.as_bytes()).map_err(ctx)?;
    std::fs::rename(&tmp, path).map_err(ctx)?;
    Ok(())
}

fn parse_bare_cell(raw: &str) -> Cell {
    if raw.is_empty() {
        return Cell::Empty;
    }
    if raw.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(n) = raw.parse::<u64>() {
            return Cell::Count(n);
        }
    }
    match raw.parse::<f64>() {
        Ok(v) => Cell::Number(v),
        Err(_) => Cell::Text(raw.to_string()),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// One record: returns None at end of input. Handles quoted fields with
    /// doubled quotes and embedded separators or line breaks.
    fn record(&mut self) -> Result<Option<Vec<Cell>>> {
        if self.pos >= self.bytes.len() {
            return Ok(None);
        }
        let mut cells = Vec::new();
        loop {
            if self.peek() == Some(b'"') {
                self.pos += 1;
                let mut text = String::new();
                loop {
                    match self.next_char()? {
                        '"' => {
                            if self.peek() == Some(b'"') {
                                self.pos += 1;
                                text.push('"');
                            } else {
                                break;
                            }
                        }
                        ch => text.push(ch),
                    }
                }
                cells.push(Cell::Text(text));
            } else {
                let start = self.pos;
                while let Some(b) = self.peek() {
                    if b == b',' || b == b'\r' || b == b'\n' {
                        break;
                    }
                    self.pos += 1;
                }
                let raw = std::str::from_utf8(&self.bytes[start..self.pos])
                    .map_err(|_| Error::invalid("CSV contains invalid UTF-8".to_string()))?;
                cells.push(parse_bare_cell(raw));
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'\r') | Some(b'\n') | None => {
                    self.eat_line_break();
                    return Ok(Some(cells));
                }
                Some(other) => {
                    return Err(Error::invalid(format!(
                        "unexpected byte 0x{other:02x} after a quoted CSV field"
                    )))
                }
            }
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn next_char(&mut self) -> Result<char> {
        let rest = std::str::from_utf8(&self.bytes[self.pos..])
            .map_err(|_| Error::invalid("CSV contains invalid UTF-8".to_string()))?;
        let ch = rest
            .chars()
            .next()
            .ok_or_else(|| Error::invalid("CSV ends inside a quoted field".to_string()))?;
        self.pos += ch.len_utf8();
        Ok(ch)
    }

    fn eat_line_break(&mut self) {
        if self.peek() == Some(b'\r') {
            self.pos += 1;
        }
        if self.peek() == Some(b'\n') {
            self.pos += 1;
        }
    }
}

/// Parse a rendered report. Leading `#` lines come back as metadata (with
/// the marker stripped); the first non-comment record is the header. Exact
/// inverse of [`render`] on anything it produced.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, CsvTable)> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    let mut metadata = Vec::new();
    while bytes.get(pos) == Some(&b'#') {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\r' || b == b'\n')
            .map(|k| pos + k)
            .unwrap_or(bytes.len());
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::invalid("CSV contains invalid UTF-8".to_string()))?;
        metadata.push(line.trim_start_matches('#').trim_start().to_string());
        pos = end;
        let mut cursor = Cursor { bytes, pos };
        cursor.eat_line_break();
        pos = cursor.pos;
    }
    let mut cursor = Cursor { bytes, pos };
    let header = cursor
        .record()?
        .ok_or_else(|| Error::invalid("CSV has no header row".to_string()))?;
    let columns: Vec<String> = header
        .into_iter()
        .map(|cell| match cell {
            Cell::Text(s) => s,
            Cell::Number(v) => format_float(v),
            Cell::Count(n) => n.to_string(),
            Cell::Empty => String::new(),
        })
        .collect();
    let mut table = CsvTable::new(columns);
    while let Some(row) = cursor.record()? {
        if row.len() != table.columns.len() {
            return Err(Error::invalid(format!(
                "CSV row has {} cells for {} columns",
                row.len(),
                table.columns.len()
            )));
        }
        table.rows.push(row);
    }
    Ok((metadata, table))
}

/// Read and parse a report file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, CsvTable)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv(&text)
}
