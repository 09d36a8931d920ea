//! Append-only run records.
//!
//! On disk a record is one JSON object per line:
//! `{"seq":N,"checksum":"<sha256 hex>","event":{"type":...}}` where the
//! checksum covers `"{seq}:{event json}"`. Every request sent to a reflector
//! is stored verbatim; inference requests are recoverable from the
//! instruction text in the record and the note ids of each rollout batch.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChatRequest, FinishReason};
use crate::metrics::LabeledEval;
use crate::optimizer::CandidateId;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    CorruptRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPurpose {
    Minibatch,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectorOperation {
    Reflect,
    Merge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        run_id: String,
        kind: String,
        config: serde_json::Value,
    },
    /// A full evaluation of one instruction on one split for one seed.
    Evaluation {
        instruction: String,
        #[serde(flatten)]
        eval: LabeledEval,
    },
    /// Any instruction about to be sent to the inference model: the seed
    /// (generation 0, no parents) or a reflected / merged child.
    CandidateProposed {
        candidate_id: CandidateId,
        parent_ids: Vec<CandidateId>,
        generation: u32,
        operation: Option<ReflectorOperation>,
        instruction: String,
    },
    /// A child beat its parent(s) on the shared minibatch and joins the pool.
    CandidateAccepted {
        candidate_id: CandidateId,
        generation: u32,
        minibatch_score: f64,
        parent_minibatch_score: f64,
    },
    CandidateEvaluated {
        candidate_id: CandidateId,
        val_scores: Vec<u8>,
        val_accuracy: f64,
    },
    Rollouts {
        generation: u32,
        candidate_id: CandidateId,
        split: String,
        purpose: RolloutPurpose,
        note_ids: Vec<String>,
        rewards: Vec<u8>,
        raw_outputs: Vec<String>,
    },
    ReflectorCall {
        generation: u32,
        operation: ReflectorOperation,
        parent_ids: Vec<CandidateId>,
        request: ChatRequest,
        reply: String,
        finish_reason: FinishReason,
    },
    /// A generation ended without adding a candidate.
    ChildRejected {
        generation: u32,
        candidate_id: Option<CandidateId>,
        parent_ids: Vec<CandidateId>,
        reason: String,
    },
    FrontierUpdated {
        generation: u32,
        frontier: Vec<CandidateId>,
        best_val_accuracy: f64,
    },
    BestSelected {
        candidate_id: CandidateId,
        birth_generation: u32,
        val_accuracy: f64,
        instruction: String,
    },
    Failure {
        scope: String,
        error: String,
    },
    Note {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    events: Vec<RunEvent>,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, kind: &str, config: serde_json::Value) -> Self {
        let run_id = run_id.into();
        Self {
            events: vec![RunEvent::RunStarted {
                run_id: run_id.clone(),
                kind: kind.to_string(),
                config,
            }],
            run_id,
        }
    }

    pub fn push(&mut self, event: RunEvent) {
        self.events.push(event);
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = RunEvent>) {
        self.events.extend(events);
    }

    pub fn events(&self) -> &[RunEvent] {
        &self.events
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &LabeledEval> {
        self.events.iter().filter_map(|e| match e {
            RunEvent::Evaluation { eval, .. } => Some(eval),
            _ => None,
        })
    }

    pub fn reflector_requests(&self) -> impl Iterator<Item = &ChatRequest> {
        self.events.iter().filter_map(|e| match e {
            RunEvent::ReflectorCall { request, .. } => Some(request),
            _ => None,
        })
    }

    pub fn best_instruction(&self) -> Option<&str> {
        self.events.iter().rev().find_map(|e| match e {
            RunEvent::BestSelected { instruction, .. } => Some(instruction.as_str()),
            _ => None,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, &str)> {
        self.events.iter().filter_map(|e| match e {
            RunEvent::Failure { scope, error } => Some((scope.as_str(), error.as_str())),
            _ => None,
        })
    }
}

fn checksum(seq: usize, event_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(seq.to_string().as_bytes());
    h.update(b":");
    h.update(event_json.as_bytes());
    hex::encode(h.finalize())
}

/// Encodes one event as a complete line, including the trailing newline.
pub fn encode_line(seq: usize, event: &RunEvent) -> String {
    let json = serde_json::to_string(event).expect("run events serialize");
    format!(
        "{{\"seq\":{seq},\"checksum\":\"{}\",\"event\":{json}}}\n",
        checksum(seq, &json)
    )
}

#[derive(Deserialize)]
struct LineRef<'a> {
    seq: usize,
    checksum: String,
    #[serde(borrow)]
    event: &'a RawValue,
}

/// Appends events to a record file as they happen.
pub struct RunWriter {
    path: PathBuf,
    out: BufWriter<File>,
    next_seq: usize,
}

impl RunWriter {
    pub fn create(path: &Path) -> Result<Self, RecordError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| RecordError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            next_seq: 0,
        })
    }

    pub fn append(&mut self, event: &RunEvent) -> Result<(), RecordError> {
        let line = encode_line(self.next_seq, event);
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|source| RecordError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.next_seq += 1;
        Ok(())
    }
}

pub fn persist_run(record: &RunRecord, path: &Path) -> Result<(), RecordError> {
    let mut w = RunWriter::create(path)?;
    for e in &record.events {
        w.append(e)?;
    }
    Ok(())
}

pub fn load_run(path: &Path) -> Result<RunRecord, RecordError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| RecordError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_record(&text).map_err(|(line, reason)| RecordError::CorruptRecord {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

/// Decodes record text; errors carry the 1-based line number.
pub fn decode_record(text: &str) -> Result<RunRecord, (usize, String)> {
    let mut events = Vec::new();
    let mut rest = text;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let (line, tail) = match rest.find('\n') {
            Some(i) => (&rest[..i], &rest[i + 1..]),
            None => return Err((line_no, "truncated line (no terminating newline)".into())),
        };
        rest = tail;
        let parsed: LineRef<'_> =
            serde_json::from_str(line).map_err(|e| (line_no, format!("invalid line: {e}")))?;
        let seq = line_no - 1;
        if parsed.seq != seq {
            return Err((line_no, format!("sequence {} where {seq} expected", parsed.seq)));
        }
        if parsed.checksum != checksum(seq, parsed.event.get()) {
            return Err((line_no, "checksum mismatch".into()));
        }
        let event: RunEvent = serde_json::from_str(parsed.event.get())
            .map_err(|e| (line_no, format!("invalid event: {e}")))?;
        events.push(event);
    }
    let run_id = match events.first() {
        Some(RunEvent::RunStarted { run_id, .. }) => run_id.clone(),
        Some(_) => return Err((1, "record does not start with run_started".into())),
        None => return Err((1, "empty record".into())),
    };
    Ok(RunRecord { run_id, events })
}
