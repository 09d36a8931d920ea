//! Genetic-Pareto instruction search.
//!
//! Each generation samples a parent from the per-instance Pareto frontier,
//! runs it on a feedback-split minibatch, asks the reflector for a revised
//! (or merged) instruction and re-runs the child on the same minibatch. A
//! child that strictly beats its parent there is scored on the full
//! validation split and joins the pool. Validation items are never shown to
//! the reflector.
//!
//! `rollout_budget` counts inference calls: validation evaluations and
//! minibatch rollouts alike.

mod frontier;
mod reflection;

use std::collections::HashSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelClient};
use crate::corpus::{Dataset, Example};
use crate::detector::{mean_reward, run_rollouts, RolloutError};
use crate::feedback::RolloutTrace;
use crate::record::{ReflectorOperation, RolloutPurpose, RunEvent, RunRecord};

pub use frontier::{select_parent, update_frontier, ScoreMatrix, WinSet};
pub use reflection::{
    extract_instruction, fill_template, format_traces, merge_request, reflection_request,
    WinSummary, MERGE_TEMPLATE, MERGE_TEMPLATE_VERSION, REFLECTION_TEMPLATE,
    REFLECTION_TEMPLATE_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateId(pub u32);

impl fmt::Display for CandidateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("unknown candidate {0}")]
    UnknownCandidate(CandidateId),
    #[error("score row has {found} columns, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("rollout budget {budget} is below one validation evaluation ({needed} calls)")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("note {note_id} from split {split} may not reach the reflector")]
    Leakage { note_id: String, split: String },
    #[error("note id {0} appears in both the feedback and validation splits")]
    SplitOverlap(String),
    #[error("could not read an instruction from the reflector reply: {0}")]
    ReflectionParse(String),
    #[error("inference on {split}: {source}")]
    Rollout {
        split: String,
        #[source]
        source: RolloutError,
    },
    #[error("reflector: {0}")]
    Reflector(#[source] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Total inference calls, validation and minibatch rollouts included.
    pub rollout_budget: usize,
    pub minibatch_size: usize,
    pub merge_probability: f64,
    pub rng_seed: u64,
    /// Children longer than this many characters are discarded.
    pub max_instruction_chars: usize,
    /// Skip reflection when the parent is already perfect on the minibatch.
    pub skip_perfect_minibatch: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rollout_budget: 2000,
            minibatch_size: 8,
            merge_probability: 0.1,
            rng_seed: 0,
            max_instruction_chars: 20_000,
            skip_perfect_minibatch: true,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self, feedback: &Dataset, val: &Dataset) -> Result<(), OptimizerError> {
        if feedback.is_empty() {
            return Err(OptimizerError::EmptyDataset(feedback.name.clone()));
        }
        if val.is_empty() {
            return Err(OptimizerError::EmptyDataset(val.name.clone()));
        }
        if self.minibatch_size == 0 || self.minibatch_size > feedback.len() {
            return Err(OptimizerError::InvalidConfig(format!(
                "minibatch_size {} must be in 1..={}",
                self.minibatch_size,
                feedback.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.merge_probability) {
            return Err(OptimizerError::InvalidConfig(format!(
                "merge_probability {} outside [0, 1]",
                self.merge_probability
            )));
        }
        if feedback.name == val.name {
            return Err(OptimizerError::InvalidConfig(
                "feedback and validation splits must differ".into(),
            ));
        }
        if self.rollout_budget < val.len() {
            return Err(OptimizerError::BudgetTooSmall {
                budget: self.rollout_budget,
                needed: val.len(),
            });
        }
        let feedback_ids: HashSet<&str> =
            feedback.items.iter().map(|e| e.note.note_id.as_str()).collect();
        if let Some(dup) = val
            .items
            .iter()
            .find(|e| feedback_ids.contains(e.note.note_id.as_str()))
        {
            return Err(OptimizerError::SplitOverlap(dup.note.note_id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: CandidateId,
    pub instruction: String,
    /// Empty for the seed, one parent for reflection, two for merge.
    pub parent_ids: Vec<CandidateId>,
    pub birth_generation: u32,
    pub val_scores: Option<Vec<u8>>,
    /// `None` for the seed, which is not born from a minibatch comparison.
    pub minibatch_score_at_birth: Option<f64>,
}

impl PromptCandidate {
    pub fn val_accuracy(&self) -> Option<f64> {
        self.val_scores
            .as_ref()
            .map(|s| mean_reward(s.iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub best: PromptCandidate,
    pub pool: Vec<PromptCandidate>,
    pub frontier: Vec<CandidateId>,
    pub calls_used: usize,
    pub generations: u32,
}

/// Runs `parent_instruction` on feedback items and attaches critiques.
pub fn run_minibatch(
    instruction: &str,
    batch: &[&Example],
    feedback_split: &str,
    inference: &ModelClient,
    seed: Option<u64>,
) -> Result<(Vec<RolloutTrace>, f64), RolloutError> {
    let rollouts = run_rollouts(inference, instruction, batch, seed)?;
    let traces: Vec<RolloutTrace> = rollouts
        .into_iter()
        .zip(batch)
        .map(|(r, ex)| RolloutTrace::new(r, ex, feedback_split))
        .collect();
    let score = mean_reward(traces.iter().map(|t| t.reward));
    Ok((traces, score))
}

/// Draws minibatch indices from the feedback split, sorted ascending.
pub fn draw_minibatch<R: Rng + ?Sized>(rng: &mut R, feedback_len: usize, size: usize) -> Vec<usize> {
    let mut idx = sample(rng, feedback_len, size).into_vec();
    idx.sort_unstable();
    idx
}

struct Search<'a> {
    cfg: &'a OptimizerConfig,
    feedback: &'a Dataset,
    val: &'a Dataset,
    inference: &'a ModelClient,
    reflector: &'a ModelClient,
    record: &'a mut RunRecord,
    rng: ChaCha8Rng,
    pool: Vec<PromptCandidate>,
    matrix: ScoreMatrix,
    frontier: Vec<CandidateId>,
    used: usize,
    next_id: u32,
}

enum Step {
    Continue,
    OutOfBudget,
}

impl<'a> Search<'a> {
    fn remaining(&self) -> usize {
        self.cfg.rollout_budget - self.used
    }

    fn candidate(&self, id: CandidateId) -> &PromptCandidate {
        self.pool.iter().find(|c| c.id == id).expect("frontier ids are in the pool")
    }

    fn fresh_id(&mut self) -> CandidateId {
        let id = CandidateId(self.next_id);
        self.next_id += 1;
        id
    }

    fn inference_seed(&self) -> Option<u64> {
        Some(self.cfg.rng_seed)
    }

    fn log_rollouts(
        &mut self,
        generation: u32,
        candidate_id: CandidateId,
        split: &str,
        purpose: RolloutPurpose,
        traces: impl IntoIterator<Item = (String, u8, String)>,
    ) {
        let (mut note_ids, mut rewards, mut raw_outputs) = (Vec::new(), Vec::new(), Vec::new());
        for (n, r, o) in traces {
            note_ids.push(n);
            rewards.push(r);
            raw_outputs.push(o);
        }
        self.record.push(RunEvent::Rollouts {
            generation,
            candidate_id,
            split: split.to_string(),
            purpose,
            note_ids,
            rewards,
            raw_outputs,
        });
    }

    fn evaluate_on_val(
        &mut self,
        generation: u32,
        id: CandidateId,
        instruction: &str,
    ) -> Result<Vec<u8>, OptimizerError> {
        let items: Vec<&Example> = self.val.items.iter().collect();
        let result = run_rollouts(self.inference, instruction, &items, self.inference_seed());
        self.used += items.len();
        let rollouts = match result {
            Ok(r) => r,
            Err(e) => {
                let partial = e
                    .completed
                    .iter()
                    .map(|r| (r.note_id.clone(), r.reward, r.completion.text.clone()))
                    .collect::<Vec<_>>();
                let split = self.val.name.clone();
                self.log_rollouts(generation, id, &split, RolloutPurpose::Validation, partial);
                return Err(OptimizerError::Rollout { split, source: e });
            }
        };
        let scores: Vec<u8> = rollouts.iter().map(|r| r.reward).collect();
        let split = self.val.name.clone();
        self.log_rollouts(
            generation,
            id,
            &split,
            RolloutPurpose::Validation,
            rollouts
                .into_iter()
                .map(|r| (r.note_id, r.reward, r.completion.text)),
        );
        self.record.push(RunEvent::CandidateEvaluated {
            candidate_id: id,
            val_scores: scores.clone(),
            val_accuracy: mean_reward(scores.iter().copied()),
        });
        Ok(scores)
    }

    fn minibatch(
        &mut self,
        generation: u32,
        id: CandidateId,
        instruction: &str,
        batch: &[&Example],
    ) -> Result<(Vec<RolloutTrace>, f64), OptimizerError> {
        let split = self.feedback.name.clone();
        let result = run_minibatch(instruction, batch, &split, self.inference, self.inference_seed());
        self.used += batch.len();
        match result {
            Ok((traces, score)) => {
                self.log_rollouts(
                    generation,
                    id,
                    &split,
                    RolloutPurpose::Minibatch,
                    traces
                        .iter()
                        .map(|t| (t.note_id.clone(), t.reward, t.raw_output.clone())),
                );
                Ok((traces, score))
            }
            Err(e) => {
                let partial = e
                    .completed
                    .iter()
                    .map(|r| (r.note_id.clone(), r.reward, r.completion.text.clone()))
                    .collect::<Vec<_>>();
                self.log_rollouts(generation, id, &split, RolloutPurpose::Minibatch, partial);
                Err(OptimizerError::Rollout { split, source: e })
            }
        }
    }

    fn add_to_pool(&mut self, generation: u32, mut cand: PromptCandidate) -> Result<(), OptimizerError> {
        let scores = self.evaluate_on_val(generation, cand.id, &cand.instruction)?;
        self.matrix.push(cand.id, scores.clone())?;
        cand.val_scores = Some(scores);
        self.pool.push(cand);
        self.frontier = update_frontier(&self.matrix)?;
        let best = self
            .pool
            .iter()
            .filter_map(PromptCandidate::val_accuracy)
            .fold(0.0, f64::max);
        self.record.push(RunEvent::FrontierUpdated {
            generation,
            frontier: self.frontier.clone(),
            best_val_accuracy: best,
        });
        Ok(())
    }

    fn reject(&mut self, generation: u32, candidate_id: Option<CandidateId>, parent_ids: &[CandidateId], reason: String) {
        tracing::debug!(generation, %reason, "child rejected");
        self.record.push(RunEvent::ChildRejected {
            generation,
            candidate_id,
            parent_ids: parent_ids.to_vec(),
            reason,
        });
    }

    fn win_summary(&self, a: CandidateId, b: CandidateId) -> (WinSummary, WinSummary) {
        let wa = self.matrix.win_set(a).expect("scored");
        let wb = self.matrix.win_set(b).expect("scored");
        let n = self.matrix.n_instances();
        let unique = |x: &WinSet, y: &WinSet| (0..n).filter(|&i| x.contains(i) && !y.contains(i)).count();
        (
            WinSummary { wins: wa.len(), unique: unique(&wa, &wb) },
            WinSummary { wins: wb.len(), unique: unique(&wb, &wa) },
        )
    }

    /// Sends a reflector request and records it together with the reply.
    fn call_reflector(
        &mut self,
        generation: u32,
        operation: ReflectorOperation,
        parent_ids: &[CandidateId],
        request: crate::backend::ChatRequest,
    ) -> Result<String, OptimizerError> {
        let completion = self
            .reflector
            .complete(&request)
            .map_err(OptimizerError::Reflector)?;
        if completion.is_truncated() {
            self.record.push(RunEvent::Note {
                message: format!(
                    "generation {generation}: reflector reply stopped at the {}-token cap",
                    request.max_tokens
                ),
            });
        }
        self.record.push(RunEvent::ReflectorCall {
            generation,
            operation,
            parent_ids: parent_ids.to_vec(),
            request,
            reply: completion.text.clone(),
            finish_reason: completion.finish_reason,
        });
        Ok(completion.text)
    }

    fn step(&mut self, generation: u32) -> Result<Step, OptimizerError> {
        let mb = self.cfg.minibatch_size;
        if self.remaining() < mb {
            return Ok(Step::OutOfBudget);
        }
        let parent_id = select_parent(&self.frontier, &self.matrix, &mut self.rng)?;
        let batch_idx = draw_minibatch(&mut self.rng, self.feedback.len(), mb);
        let feedback = self.feedback;
        let batch: Vec<&Example> = batch_idx.iter().map(|&i| &feedback.items[i]).collect();
        let parent_instruction = self.candidate(parent_id).instruction.clone();
        let (traces, parent_score) = self.minibatch(generation, parent_id, &parent_instruction, &batch)?;

        // drawn every generation so the merge decision stream does not
        // depend on which branch earlier generations took
        let merge_draw: f64 = self.rng.random();
        if self.cfg.skip_perfect_minibatch && parent_score >= 1.0 {
            self.reject(generation, None, &[parent_id], "parent is perfect on the minibatch".into());
            return Ok(Step::Continue);
        }

        let wants_merge = merge_draw < self.cfg.merge_probability && self.frontier.len() >= 2;
        let (operation, parent_ids, baseline, reply) = if wants_merge {
            let others: Vec<CandidateId> = self.frontier.iter().copied().filter(|&c| c != parent_id).collect();
            let other = select_parent(&others, &self.matrix, &mut self.rng)?;
            if self.remaining() < mb {
                return Ok(Step::OutOfBudget);
            }
            let other_instruction = self.candidate(other).instruction.clone();
            let (_, other_score) = self.minibatch(generation, other, &other_instruction, &batch)?;
            let (wa, wb) = self.win_summary(parent_id, other);
            let req = merge_request(
                &parent_instruction,
                wa,
                &other_instruction,
                wb,
                self.val.len(),
                self.reflector,
            );
            let parents = vec![parent_id, other];
            let reply = self.call_reflector(generation, ReflectorOperation::Merge, &parents, req)?;
            (ReflectorOperation::Merge, parents, parent_score.max(other_score), reply)
        } else {
            let req = reflection_request(&parent_instruction, &traces, &self.feedback.name, self.reflector)?;
            let parents = vec![parent_id];
            let reply = self.call_reflector(generation, ReflectorOperation::Reflect, &parents, req)?;
            (ReflectorOperation::Reflect, parents, parent_score, reply)
        };

        let child_instruction = match extract_instruction(&reply) {
            Ok(c) => c,
            Err(e) => {
                self.reject(generation, None, &parent_ids, e.to_string());
                return Ok(Step::Continue);
            }
        };
        let chars = child_instruction.chars().count();
        if chars > self.cfg.max_instruction_chars {
            self.reject(
                generation,
                None,
                &parent_ids,
                format!("instruction of {chars} characters exceeds the {} cap", self.cfg.max_instruction_chars),
            );
            return Ok(Step::Continue);
        }
        if let Some(existing) = self.pool.iter().find(|c| c.instruction == child_instruction) {
            let reason = format!("identical to pool candidate {}", existing.id);
            self.reject(generation, None, &parent_ids, reason);
            return Ok(Step::Continue);
        }
        if self.remaining() < mb {
            return Ok(Step::OutOfBudget);
        }

        let child_id = self.fresh_id();
        self.record.push(RunEvent::CandidateProposed {
            candidate_id: child_id,
            parent_ids: parent_ids.clone(),
            generation,
            operation: Some(operation),
            instruction: child_instruction.clone(),
        });
        let (_, child_score) = self.minibatch(generation, child_id, &child_instruction, &batch)?;
        if child_score <= baseline {
            self.reject(
                generation,
                Some(child_id),
                &parent_ids,
                format!("minibatch score {child_score} does not beat {baseline}"),
            );
            return Ok(Step::Continue);
        }
        if self.remaining() < self.val.len() {
            self.reject(
                generation,
                Some(child_id),
                &parent_ids,
                "budget left is below one validation evaluation".into(),
            );
            return Ok(Step::OutOfBudget);
        }
        self.record.push(RunEvent::CandidateAccepted {
            candidate_id: child_id,
            generation,
            minibatch_score: child_score,
            parent_minibatch_score: baseline,
        });
        let child = PromptCandidate {
            id: child_id,
            instruction: child_instruction,
            parent_ids,
            birth_generation: generation,
            val_scores: None,
            minibatch_score_at_birth: Some(child_score),
        };
        self.add_to_pool(generation, child)?;
        Ok(Step::Continue)
    }

    fn best(&self) -> &PromptCandidate {
        // highest mean validation score; ties go to the earliest birth
        let mut best = &self.pool[0];
        for c in &self.pool[1..] {
            let (a, b) = (c.val_accuracy().unwrap_or(0.0), best.val_accuracy().unwrap_or(0.0));
            if a > b || (a == b && c.birth_generation < best.birth_generation) {
                best = c;
            }
        }
        best
    }
}

/// Searches for a better detection instruction, starting from
/// `seed_instruction`. Lineage events are appended to `record` as they
/// happen, so a failed run still leaves its partial history behind.
pub fn optimize(
    cfg: &OptimizerConfig,
    seed_instruction: &str,
    feedback: &Dataset,
    val: &Dataset,
    inference: &ModelClient,
    reflector: &ModelClient,
    record: &mut RunRecord,
) -> Result<Optimized, OptimizerError> {
    cfg.validate(feedback, val)?;
    if seed_instruction.trim().is_empty() {
        return Err(OptimizerError::InvalidConfig("seed instruction is empty".into()));
    }
    let mut search = Search {
        cfg,
        feedback,
        val,
        inference,
        reflector,
        record,
        rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
        pool: Vec::new(),
        matrix: ScoreMatrix::new(val.len()),
        frontier: Vec::new(),
        used: 0,
        next_id: 0,
    };

    let seed_id = search.fresh_id();
    search.record.push(RunEvent::CandidateProposed {
        candidate_id: seed_id,
        parent_ids: vec![],
        generation: 0,
        operation: None,
        instruction: seed_instruction.to_string(),
    });
    let seed = PromptCandidate {
        id: seed_id,
        instruction: seed_instruction.to_string(),
        parent_ids: vec![],
        birth_generation: 0,
        val_scores: None,
        minibatch_score_at_birth: None,
    };
    search.add_to_pool(0, seed)?;

    let mut generation = 0;
    while let Step::Continue = search.step(generation + 1)? {
        generation += 1;
    }
    search.record.push(RunEvent::Note {
        message: format!(
            "search stopped after {generation} generation(s): {} of {} inference calls used",
            search.used, cfg.rollout_budget
        ),
    });

    let best = search.best().clone();
    search.record.push(RunEvent::BestSelected {
        candidate_id: best.id,
        birth_generation: best.birth_generation,
        val_accuracy: best.val_accuracy().unwrap_or(0.0),
        instruction: best.instruction.clone(),
    });
    Ok(Optimized {
        best,
        frontier: search.frontier.clone(),
        pool: search.pool,
        calls_used: search.used,
        generations: generation,
    })
}
