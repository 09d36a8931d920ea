//! Clinical note datasets: sentence-per-line notes, ground truth labels and
//! named splits loaded from line-delimited or delimiter-separated files.
//!
//! A note is rendered to models in the canonical `id|sentence` form. Input
//! files may use either a pipe or a whitespace run after the sentence id.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("note {note_id}: line {line}: {reason}")]
    MalformedLine {
        note_id: String,
        line: usize,
        reason: String,
    },
    #[error("note {note_id}: duplicate sentence id {id}")]
    DuplicateSentenceId { note_id: String, id: u32 },
    #[error("note {note_id}: sentence id {id} does not increase past {previous}")]
    NonMonotonicIds {
        note_id: String,
        previous: u32,
        id: u32,
    },
    #[error("note {note_id}: empty note text")]
    EmptyNote { note_id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema error: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("{path}: row {row}: {reason}")]
    InvariantViolation {
        path: PathBuf,
        row: String,
        reason: String,
    },
}

/// How the sentence id is separated from the sentence text on input lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparatorPolicy {
    /// `12|text`, optionally with spaces around the pipe.
    Pipe,
    /// `12 text`
    Whitespace,
    /// Pipe when present, whitespace otherwise.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub note_id: String,
    pub sentences: Vec<Sentence>,
}

impl ClinicalNote {
    /// Builds a note from already split sentences, enforcing the same rules
    /// as [`parse_note`].
    pub fn new(
        note_id: impl Into<String>,
        sentences: Vec<Sentence>,
    ) -> Result<Self, CorpusError> {
        let note_id = note_id.into();
        if sentences.is_empty() {
            return Err(CorpusError::EmptyNote { note_id });
        }
        let mut previous: Option<u32> = None;
        let mut seen = HashSet::new();
        for (idx, s) in sentences.iter().enumerate() {
            if s.text.is_empty() || s.text.trim() != s.text || s.text.contains(['\n', '\r']) {
                return Err(CorpusError::MalformedLine {
                    note_id,
                    line: idx + 1,
                    reason: "sentence text must be non-empty, trimmed and single-line".into(),
                });
            }
            check_order(&note_id, &mut seen, &mut previous, s.id)?;
        }
        Ok(Self {
            note_id,
            sentences,
        })
    }

    pub fn sentence(&self, id: u32) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    /// Canonical `id|sentence` rendering, one sentence per line, no trailing
    /// newline.
    pub fn render_pipe(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&s.id.to_string());
            out.push('|');
            out.push_str(&s.text);
        }
        out
    }
}

fn check_order(
    note_id: &str,
    seen: &mut HashSet<u32>,
    previous: &mut Option<u32>,
    id: u32,
) -> Result<(), CorpusError> {
    if !seen.insert(id) {
        return Err(CorpusError::DuplicateSentenceId {
            note_id: note_id.to_string(),
            id,
        });
    }
    if let Some(prev) = *previous {
        if id <= prev {
            return Err(CorpusError::NonMonotonicIds {
                note_id: note_id.to_string(),
                previous: prev,
                id,
            });
        }
    }
    *previous = Some(id);
    Ok(())
}

/// Parses a sentence-per-line note. Blank lines are skipped.
pub fn parse_note(
    note_id: &str,
    raw_text: &str,
    policy: SeparatorPolicy,
) -> Result<ClinicalNote, CorpusError> {
    let mut sentences = Vec::new();
    let mut seen = HashSet::new();
    let mut previous = None;
    for (idx, line) in raw_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| CorpusError::MalformedLine {
            note_id: note_id.to_string(),
            line: idx + 1,
            reason: reason.to_string(),
        };
        let digits = line.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(malformed("no leading sentence id"));
        }
        let id: u32 = line[..digits]
            .parse()
            .map_err(|_| malformed("sentence id out of range"))?;
        let rest = &line[digits..];
        let text = split_separator(rest, policy).ok_or_else(|| malformed("missing separator"))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(malformed("empty sentence text"));
        }
        check_order(note_id, &mut seen, &mut previous, id)?;
        sentences.push(Sentence {
            id,
            text: text.to_string(),
        });
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyNote {
            note_id: note_id.to_string(),
        });
    }
    Ok(ClinicalNote {
        note_id: note_id.to_string(),
        sentences,
    })
}

/// Returns the remainder after the separator, or `None` when the policy's
/// separator is absent.
fn split_separator(rest: &str, policy: SeparatorPolicy) -> Option<&str> {
    let pipe = || {
        rest.trim_start_matches([' ', '\t'])
            .strip_prefix('|')
    };
    let whitespace = || {
        let trimmed = rest.trim_start();
        (trimmed.len() < rest.len()).then_some(trimmed)
    };
    match policy {
        SeparatorPolicy::Pipe => pipe(),
        SeparatorPolicy::Whitespace => whitespace(),
        SeparatorPolicy::Auto => pipe().or_else(whitespace),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub has_error: bool,
    pub error_sentence_id: Option<u32>,
    pub corrected_sentence: Option<String>,
}

impl GroundTruth {
    pub fn correct() -> Self {
        Self {
            has_error: false,
            error_sentence_id: None,
            corrected_sentence: None,
        }
    }

    pub fn error(sentence_id: u32, corrected: impl Into<String>) -> Self {
        Self {
            has_error: true,
            error_sentence_id: Some(sentence_id),
            corrected_sentence: Some(corrected.into()),
        }
    }

    /// Checks the label against its note: an error label names an existing
    /// sentence and carries a correction, a correct label carries neither.
    pub fn validate(&self, note: &ClinicalNote) -> Result<(), String> {
        match (self.has_error, self.error_sentence_id, &self.corrected_sentence) {
            (true, Some(id), Some(c)) => {
                if c.trim().is_empty() {
                    Err("corrected sentence is empty".into())
                } else if note.sentence(id).is_none() {
                    Err(format!("error sentence id {id} not present in note"))
                } else {
                    Ok(())
                }
            }
            (true, None, _) => Err("error flag set but no error sentence id".into()),
            (true, _, None) => Err("error flag set but no corrected sentence".into()),
            (false, None, None) => Ok(()),
            (false, _, _) => Err("error flag unset but error fields present".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub note: ClinicalNote,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<Example>,
}

impl Dataset {
    /// Validates note id uniqueness and every label.
    pub fn new(name: impl Into<String>, items: Vec<Example>) -> Result<Self, CorpusError> {
        let name = name.into();
        let path = PathBuf::from(format!("<{name}>"));
        let mut ids = HashSet::new();
        for ex in &items {
            let violation = |reason: String| CorpusError::InvariantViolation {
                path: path.clone(),
                row: ex.note.note_id.clone(),
                reason,
            };
            ex.truth.validate(&ex.note).map_err(violation)?;
            if !ids.insert(ex.note.note_id.as_str()) {
                return Err(violation("duplicate note id".into()));
            }
        }
        Ok(Self { name, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub n_total: usize,
    pub n_correct: usize,
    pub n_error: usize,
}

pub fn split_summary(ds: &Dataset) -> SplitSummary {
    let n_error = ds.items.iter().filter(|ex| ex.truth.has_error).count();
    SplitSummary {
        n_total: ds.items.len(),
        n_correct: ds.items.len() - n_error,
        n_error,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    /// One JSON object per line.
    #[default]
    Jsonl,
    /// Delimiter-separated with a header row.
    Delimited,
}

/// Names the fields holding each part of a labelled note.
///
/// Integer sentence ids below zero and any value in `null_values` are read
/// as absent, which covers the `-1` / `NA` conventions of the public MEDEC
/// CSV files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub format: FileFormat,
    pub delimiter: char,
    pub note_id: String,
    pub text: String,
    pub error_flag: String,
    pub error_sentence_id: String,
    pub corrected_sentence: String,
    pub separator: SeparatorPolicy,
    pub null_values: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            format: FileFormat::Jsonl,
            delimiter: ',',
            note_id: "note_id".into(),
            text: "text".into(),
            error_flag: "error_flag".into(),
            error_sentence_id: "error_sentence_id".into(),
            corrected_sentence: "corrected_sentence".into(),
            separator: SeparatorPolicy::Auto,
            null_values: vec!["".into(), "NA".into(), "N/A".into(), "null".into()],
        }
    }
}

impl ColumnMapping {
    /// Column names used by the public MEDEC CSV release.
    pub fn medec_csv() -> Self {
        Self {
            format: FileFormat::Delimited,
            note_id: "Text ID".into(),
            text: "Sentences".into(),
            error_flag: "Error Flag".into(),
            error_sentence_id: "Error Sentence ID".into(),
            corrected_sentence: "Corrected Sentence".into(),
            ..Self::default()
        }
    }
}

/// A loosely typed field value read from either file format.
#[derive(Debug)]
enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Text(String),
}

impl Cell {
    fn from_json(v: &Value) -> Result<Self, String> {
        Ok(match v {
            Value::Null => Cell::Null,
            Value::Bool(b) => Cell::Bool(*b),
            Value::Number(n) => Cell::Int(
                n.as_i64()
                    .ok_or_else(|| format!("expected an integer, found {n}"))?,
            ),
            Value::String(s) => Cell::Text(s.clone()),
            other => return Err(format!("unsupported value {other}")),
        })
    }
}

struct RowReader<'a> {
    mapping: &'a ColumnMapping,
    path: &'a Path,
}

impl RowReader<'_> {
    fn is_null(&self, s: &str) -> bool {
        self.mapping.null_values.iter().any(|n| n == s.trim())
    }

    fn text(&self, cell: Cell, field: &str) -> Result<Option<String>, String> {
        match cell {
            Cell::Null => Ok(None),
            Cell::Text(s) if self.is_null(&s) => Ok(None),
            Cell::Text(s) => Ok(Some(s)),
            Cell::Int(i) => Ok(Some(i.to_string())),
            Cell::Bool(_) => Err(format!("field `{field}` must be text")),
        }
    }

    fn flag(&self, cell: Cell, field: &str) -> Result<bool, String> {
        let bad = || format!("field `{field}` is not a boolean flag");
        match cell {
            Cell::Bool(b) => Ok(b),
            Cell::Int(0) => Ok(false),
            Cell::Int(1) => Ok(true),
            Cell::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "y" => Ok(true),
                "0" | "false" | "no" | "n" => Ok(false),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }

    fn sentence_id(&self, cell: Cell, field: &str) -> Result<Option<u32>, String> {
        let int = match cell {
            Cell::Null => return Ok(None),
            Cell::Int(i) => i,
            Cell::Text(s) if self.is_null(&s) => return Ok(None),
            Cell::Text(s) => s
                .trim()
                .parse::<i64>()
                .map_err(|_| format!("field `{field}` is not an integer: {s:?}"))?,
            Cell::Bool(_) => return Err(format!("field `{field}` is not an integer")),
        };
        if int < 0 {
            return Ok(None);
        }
        u32::try_from(int)
            .map(Some)
            .map_err(|_| format!("field `{field}` out of range: {int}"))
    }

    fn example(&self, row_label: &str, fields: [Cell; 5]) -> Result<Example, CorpusError> {
        let m = self.mapping;
        let violation = |reason: String| CorpusError::InvariantViolation {
            path: self.path.to_path_buf(),
            row: row_label.to_string(),
            reason,
        };
        let [id_cell, text_cell, flag_cell, sid_cell, corr_cell] = fields;
        let note_id = self
            .text(id_cell, &m.note_id)
            .map_err(&violation)?
            .ok_or_else(|| violation("missing note id".into()))?;
        let text = self
            .text(text_cell, &m.text)
            .map_err(&violation)?
            .ok_or_else(|| violation("missing note text".into()))?;
        let has_error = self.flag(flag_cell, &m.error_flag).map_err(&violation)?;
        let error_sentence_id = self
            .sentence_id(sid_cell, &m.error_sentence_id)
            .map_err(&violation)?;
        let corrected_sentence = self
            .text(corr_cell, &m.corrected_sentence)
            .map_err(&violation)?;
        let note = parse_note(&note_id, &text, m.separator)
            .map_err(|e| violation(e.to_string()))?;
        let truth = GroundTruth {
            has_error,
            error_sentence_id,
            corrected_sentence,
        };
        truth.validate(&note).map_err(&violation)?;
        Ok(Example { note, truth })
    }
}

/// Loads one split. Row order is preserved.
pub fn load_split(
    name: &str,
    path: &Path,
    mapping: &ColumnMapping,
) -> Result<Dataset, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let reader = RowReader { mapping, path };
    let items = match mapping.format {
        FileFormat::Jsonl => load_jsonl(BufReader::new(file), &reader)?,
        FileFormat::Delimited => load_delimited(file, &reader)?,
    };
    let mut ids = HashSet::new();
    for ex in &items {
        if !ids.insert(ex.note.note_id.clone()) {
            return Err(CorpusError::InvariantViolation {
                path: path.to_path_buf(),
                row: ex.note.note_id.clone(),
                reason: "duplicate note id within split".into(),
            });
        }
    }
    Ok(Dataset {
        name: name.to_string(),
        items,
    })
}

fn field_names(m: &ColumnMapping) -> [&str; 5] {
    [
        &m.note_id,
        &m.text,
        &m.error_flag,
        &m.error_sentence_id,
        &m.corrected_sentence,
    ]
}

fn load_jsonl(input: impl BufRead, reader: &RowReader<'_>) -> Result<Vec<Example>, CorpusError> {
    let path = reader.path;
    let mut items = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row_label = format!("line {}", idx + 1);
        let obj: serde_json::Map<String, Value> =
            serde_json::from_str(&line).map_err(|e| CorpusError::InvariantViolation {
                path: path.to_path_buf(),
                row: row_label.clone(),
                reason: format!("invalid JSON object: {e}"),
            })?;
        let mut cells = Vec::with_capacity(5);
        for (i, field) in field_names(reader.mapping).into_iter().enumerate() {
            let cell = match obj.get(field) {
                Some(v) => Cell::from_json(v).map_err(|reason| CorpusError::InvariantViolation {
                    path: path.to_path_buf(),
                    row: row_label.clone(),
                    reason: format!("field `{field}`: {reason}"),
                })?,
                // the three label-detail fields may be omitted for correct notes
                None if i >= 3 => Cell::Null,
                None => {
                    return Err(CorpusError::Schema {
                        path: path.to_path_buf(),
                        reason: format!("{row_label}: missing field `{field}`"),
                    })
                }
            };
            cells.push(cell);
        }
        let cells: [Cell; 5] = cells.try_into().expect("five fields");
        items.push(reader.example(&row_label, cells)?);
    }
    Ok(items)
}

fn load_delimited(input: File, reader: &RowReader<'_>) -> Result<Vec<Example>, CorpusError> {
    let path = reader.path;
    let m = reader.mapping;
    if !m.delimiter.is_ascii() {
        return Err(CorpusError::Schema {
            path: path.to_path_buf(),
            reason: format!("delimiter {:?} must be a single ASCII character", m.delimiter),
        });
    }
    let csv_err = |e: csv::Error| CorpusError::Schema {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(m.delimiter as u8)
        .flexible(false)
        .from_reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut columns = [0usize; 5];
    for (slot, field) in columns.iter_mut().zip(field_names(m)) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == field)
            .ok_or_else(|| CorpusError::Schema {
                path: path.to_path_buf(),
                reason: format!("missing column `{field}`"),
            })?;
    }
    let mut items = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row_label = format!("row {}", idx + 1);
        let cells = columns.map(|c| Cell::Text(record.get(c).unwrap_or_default().to_string()));
        items.push(reader.example(&row_label, cells)?);
    }
    Ok(items)
}

impl fmt::Display for SplitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} notes ({} correct, {} with error)",
            self.n_total, self.n_correct, self.n_error
        )
    }
}
