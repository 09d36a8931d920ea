//! Scripted environments shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use notecheck::backend::{ModelClient, Role, ScriptedBackend};
use notecheck::corpus::{parse_note, Dataset, Example, GroundTruth, SeparatorPolicy};
use notecheck::optimizer::{optimize, OptimizerConfig, Optimized};
use notecheck::record::{persist_run, RunRecord};

pub mod stub;

pub const TOKEN: &str = "MAGIC";

/// Alternating correct / erroneous notes; every sentence names its split
/// and index so leaks are easy to spot.
pub fn split(name: &str, n: usize) -> Dataset {
    let items = (0..n)
        .map(|i| {
            let text = format!(
                "0|Patient {name}-{i} is a 54-year-old seen in clinic.\n\
                 1|Vitals for {name}-{i} are within normal limits.\n\
                 2|Diagnosis for {name}-{i} is community-acquired pneumonia."
            );
            let note = parse_note(&format!("{name}-{i}"), &text, SeparatorPolicy::Pipe).unwrap();
            let truth = if i % 2 == 0 {
                GroundTruth::correct()
            } else {
                GroundTruth::error(2, format!("Diagnosis for {name}-{i} is pulmonary embolism."))
            };
            Example { note, truth }
        })
        .collect();
    Dataset::new(name, items).unwrap()
}

/// Answers correctly when the system prompt contains the token, otherwise
/// always says CORRECT.
pub fn magic_inference(datasets: &[&Dataset], max_in_flight: usize) -> ModelClient {
    let truths: HashMap<String, GroundTruth> = datasets
        .iter()
        .flat_map(|d| d.items.iter())
        .map(|e| (e.note.render_pipe(), e.truth.clone()))
        .collect();
    let backend = ScriptedBackend::respond(move |req| {
        let user = req.content(Role::User)?;
        let knows = req.content(Role::System).is_some_and(|s| s.contains(TOKEN));
        let truth = truths.get(user)?;
        Some(match (knows, truth.error_sentence_id, &truth.corrected_sentence) {
            (true, Some(id), Some(c)) => format!("{id} {c}"),
            _ => "CORRECT".to_string(),
        })
    })
    .with_max_in_flight(max_in_flight);
    ModelClient::new("sim-inference", Arc::new(backend))
}

/// Inserts the token once it has seen a failing trace; otherwise echoes a
/// fixed rewrite.
pub fn magic_reflector() -> ModelClient {
    let backend = ScriptedBackend::respond(|req| {
        let body = req.content(Role::User)?;
        Some(if body.contains("## Reward\n0") {
            format!("Revised:\n```\nCheck every sentence for clinical errors. {TOKEN}\n```")
        } else {
            "```\nCheck every sentence.\n```".to_string()
        })
    });
    ModelClient::new("sim-reflector", Arc::new(backend))
}

pub struct MagicRun {
    pub out: Optimized,
    pub record: RunRecord,
    pub bytes: Vec<u8>,
    pub feedback: Dataset,
    pub val: Dataset,
}

pub fn magic_config() -> OptimizerConfig {
    OptimizerConfig {
        rollout_budget: 300,
        minibatch_size: 8,
        merge_probability: 0.1,
        rng_seed: 17,
        ..OptimizerConfig::default()
    }
}

pub fn run_magic(cfg: &OptimizerConfig) -> MagicRun {
    let feedback = split("fb", 24);
    let val = split("val", 12);
    let inference = magic_inference(&[&feedback, &val], 4);
    let reflector = magic_reflector();
    let mut record = RunRecord::new("magic", "optimize", serde_json::to_value(cfg).unwrap());
    let out = optimize(cfg, "Find the error.", &feedback, &val, &inference, &reflector, &mut record).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    persist_run(&record, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    MagicRun { out, record, bytes, feedback, val }
}

/// Validation note ids and sentence texts found in any reflector request.
pub fn leaked_strings(record: &RunRecord, val: &Dataset) -> Vec<String> {
    let needles: Vec<String> = val
        .items
        .iter()
        .flat_map(|e| {
            std::iter::once(e.note.note_id.clone())
                .chain(e.note.sentences.iter().map(|s| s.text.clone()))
                .chain(e.truth.corrected_sentence.clone())
        })
        .collect();
    let mut leaks = Vec::new();
    for req in record.reflector_requests() {
        let body = serde_json::to_string(req).unwrap();
        for m in &req.messages {
            for n in &needles {
                if m.content.contains(n.as_str()) || body.contains(n.as_str()) {
                    leaks.push(n.clone());
                }
            }
        }
    }
    leaks
}
