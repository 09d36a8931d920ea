//! The detection task: render an instruction and a note into chat messages,
//! read the model's reply as a verdict, and score it against the label.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Completion, FinishReason, Message, ModelClient};
use crate::corpus::{ClinicalNote, Dataset, Example, GroundTruth};

/// The MEDEC zero-shot detection instruction, used as the baseline and as the
/// seed of every optimization run.
pub const P1_INSTRUCTION: &str = include_str!("../assets/p1_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    CorrectText,
    Flagged,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    CorrectText {
        raw_output: String,
    },
    Flagged {
        sentence_id: u32,
        corrected_sentence: String,
        raw_output: String,
    },
    Malformed {
        raw_output: String,
    },
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::CorrectText { .. } => VerdictKind::CorrectText,
            Verdict::Flagged { .. } => VerdictKind::Flagged,
            Verdict::Malformed { .. } => VerdictKind::Malformed,
        }
    }

    pub fn raw_output(&self) -> &str {
        match self {
            Verdict::CorrectText { raw_output }
            | Verdict::Flagged { raw_output, .. }
            | Verdict::Malformed { raw_output } => raw_output,
        }
    }

    pub fn flagged_sentence_id(&self) -> Option<u32> {
        match self {
            Verdict::Flagged { sentence_id, .. } => Some(*sentence_id),
            _ => None,
        }
    }

    pub fn corrected_sentence(&self) -> Option<&str> {
        match self {
            Verdict::Flagged {
                corrected_sentence, ..
            } => Some(corrected_sentence),
            _ => None,
        }
    }
}

/// System message carries the instruction, user message the note in
/// `id|sentence` form.
pub fn render_prompt(instruction: &str, note: &ClinicalNote) -> Vec<Message> {
    vec![Message::system(instruction), Message::user(note.render_pipe())]
}

/// Reads a model reply. Never fails: anything outside the output contract is
/// `Malformed`.
pub fn parse_verdict(raw: &str) -> Verdict {
    let raw_output = raw.to_string();
    let trimmed = raw.trim();
    let bare = trimmed.trim_end_matches(|c: char| c.is_ascii_punctuation());
    if bare.eq_ignore_ascii_case("CORRECT") {
        return Verdict::CorrectText { raw_output };
    }
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &trimmed[digits..];
        let remainder = rest.trim_start();
        if remainder.len() < rest.len() && !remainder.is_empty() {
            if let Ok(sentence_id) = trimmed[..digits].parse() {
                return Verdict::Flagged {
                    sentence_id,
                    corrected_sentence: remainder.to_string(),
                    raw_output,
                };
            }
        }
    }
    Verdict::Malformed { raw_output }
}

/// Binary detection reward. The flagged sentence id is not checked.
pub fn score_detection(verdict: &Verdict, truth: &GroundTruth) -> u8 {
    match (verdict.kind(), truth.has_error) {
        (VerdictKind::Flagged, true) | (VerdictKind::CorrectText, false) => 1,
        _ => 0,
    }
}

/// One scored model call.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub note_id: String,
    pub messages: Vec<Message>,
    pub completion: Completion,
    pub verdict: Verdict,
    pub reward: u8,
}

#[derive(Debug, Error)]
#[error("rollout for note {note_id} failed: {source}")]
pub struct RolloutError {
    pub note_id: String,
    #[source]
    pub source: BackendError,
    /// Rollouts that finished before the failure, in input order.
    pub completed: Vec<Rollout>,
}

fn rollout_one(
    client: &ModelClient,
    instruction: &str,
    example: &Example,
    seed: Option<u64>,
) -> Result<Rollout, BackendError> {
    let messages = render_prompt(instruction, &example.note);
    let req = client.request(messages, seed);
    let completion = client.complete(&req)?;
    if completion.is_truncated() {
        tracing::warn!(note_id = %example.note.note_id, "detection reply truncated at the token cap");
    }
    let verdict = parse_verdict(&completion.text);
    let reward = score_detection(&verdict, &example.truth);
    Ok(Rollout {
        note_id: example.note.note_id.clone(),
        messages: req.messages,
        completion,
        verdict,
        reward,
    })
}

/// Runs one rollout per item, up to the client's in-flight limit at a time.
/// Output order follows `items` regardless of completion order.
pub fn run_rollouts(
    client: &ModelClient,
    instruction: &str,
    items: &[&Example],
    seed: Option<u64>,
) -> Result<Vec<Rollout>, RolloutError> {
    let n = items.len();
    let workers = client.max_in_flight().min(n);
    let slots: Vec<Mutex<Option<Result<Rollout, BackendError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    if workers <= 1 {
        for (slot, ex) in slots.iter().zip(items) {
            let r = rollout_one(client, instruction, ex, seed);
            let failed = r.is_err();
            *slot.lock().unwrap() = Some(r);
            if failed {
                break;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = rollout_one(client, instruction, items[i], seed);
                    if r.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
    }
    let mut done = Vec::with_capacity(n);
    let mut failure = None;
    for (slot, ex) in slots.into_iter().zip(items) {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => done.push(r),
            Some(Err(e)) if failure.is_none() => failure = Some((ex.note.note_id.clone(), e)),
            _ => {}
        }
    }
    match failure {
        Some((note_id, source)) => Err(RolloutError {
            note_id,
            source,
            completed: done,
        }),
        None => Ok(done),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub note_id: String,
    pub verdict: Verdict,
    pub reward: u8,
    pub truth_has_error: bool,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub seed: u64,
    pub per_item: Vec<ItemResult>,
    pub accuracy: f64,
}

impl EvalResult {
    pub fn from_items(split: impl Into<String>, seed: u64, per_item: Vec<ItemResult>) -> Self {
        let accuracy = mean_reward(per_item.iter().map(|i| i.reward));
        Self {
            split: split.into(),
            seed,
            per_item,
            accuracy,
        }
    }

    pub fn malformed(&self) -> usize {
        self.per_item
            .iter()
            .filter(|i| i.verdict.kind() == VerdictKind::Malformed)
            .count()
    }
}

/// Mean of 0/1 rewards; 0 for an empty input.
pub fn mean_reward(rewards: impl IntoIterator<Item = u8>) -> f64 {
    let (sum, n) = rewards
        .into_iter()
        .fold((0u64, 0u64), |(s, n), r| (s + u64::from(r), n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("split {split}, seed {seed}: {source}")]
    Rollout {
        split: String,
        seed: u64,
        #[source]
        source: RolloutError,
    },
}

/// Scores `instruction` on every item of `ds`, once per seed.
pub fn evaluate_prompt(
    instruction: &str,
    ds: &Dataset,
    client: &ModelClient,
    seeds: &[u64],
) -> Result<Vec<EvalResult>, DetectorError> {
    if instruction.trim().is_empty() {
        return Err(DetectorError::EmptyInstruction);
    }
    if ds.is_empty() {
        return Err(DetectorError::EmptyDataset(ds.name.clone()));
    }
    if seeds.is_empty() {
        return Err(DetectorError::NoSeeds);
    }
    let items: Vec<&Example> = ds.items.iter().collect();
    seeds
        .iter()
        .map(|&seed| {
            let rollouts = run_rollouts(client, instruction, &items, Some(seed)).map_err(
                |source| DetectorError::Rollout {
                    split: ds.name.clone(),
                    seed,
                    source,
                },
            )?;
            let per_item = rollouts
                .into_iter()
                .zip(&items)
                .map(|(r, ex)| ItemResult {
                    note_id: r.note_id,
                    verdict: r.verdict,
                    reward: r.reward,
                    truth_has_error: ex.truth.has_error,
                    finish_reason: r.completion.finish_reason,
                })
                .collect();
            Ok(EvalResult::from_items(ds.name.clone(), seed, per_item))
        })
        .collect()
}
