//! Evaluation, optimization and reporting runs driven by one config file.
//!
//! Every command writes its run record (one checksummed JSON event per line)
//! plus CSV tables into the output directory. File names start with the
//! configured `run_id`.

pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use notecheck::corpus::Dataset;
use notecheck::detector::evaluate_prompt;
use notecheck::metrics::{summarize, write_csv, LabeledEval, MetricsRow};
use notecheck::optimizer::optimize;
use notecheck::record::{persist_run, RunEvent, RunRecord};
use serde::Serialize;
use thiserror::Error;

pub use config::{parse_pairing, BackendRegistry, Pairing, RunConfig};
pub use report::{cmd_report, ReportOptions, ReportSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({"error": {"kind": kind, "message": message, "exit_code": self.exit_code()}})
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).map_err(|e| io_err(path, e))?;
    write_file(path, &buf)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn config_snapshot(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Per-seed accuracy rows plus the seed-aggregated summary.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub reflector: String,
    pub split: String,
    pub n_items: usize,
    pub n_seeds: usize,
    pub mean: f64,
    /// Sample (n-1) standard deviation; empty for a single seed.
    pub std: Option<f64>,
    pub display: String,
}

fn summary_rows<'a>(evals: impl IntoIterator<Item = &'a LabeledEval>) -> Vec<SummaryRow> {
    summarize(evals)
        .into_iter()
        .map(|c| SummaryRow {
            model: c.model,
            reflector: c.reflector.unwrap_or_default(),
            split: c.split,
            n_items: c.n_items,
            n_seeds: c.summary.n,
            mean: c.summary.mean,
            std: c.summary.std,
            display: c.summary.display(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub record: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub cells: Vec<SummaryRow>,
}

/// Scores the task instruction for every configured (model, split, seed).
pub fn cmd_evaluate(cfg: &RunConfig, registry: &BackendRegistry) -> Result<EvaluateSummary, CliError> {
    cfg.validate()?;
    let spec = cfg
        .evaluate
        .as_ref()
        .ok_or_else(|| CliError::Config("no [evaluate] section".into()))?;
    let instruction = cfg.instruction()?;
    let datasets: Vec<Dataset> = spec
        .splits
        .iter()
        .map(|s| cfg.load_dataset(s))
        .collect::<Result<_, _>>()?;
    let clients = spec
        .models
        .iter()
        .map(|m| registry.client(cfg, m).map(|c| (m, c)))
        .collect::<Result<Vec<_>, _>>()?;

    let out = cfg.output_dir();
    ensure_dir(&out)?;
    let record_path = out.join(format!("{}.evaluate.jsonl", cfg.run_id));
    let mut record = RunRecord::new(cfg.run_id.clone(), "evaluate", config_snapshot(cfg));
    let mut failure = None;
    'outer: for (name, client) in &clients {
        for ds in &datasets {
            tracing::info!(model = %name, split = %ds.name, "evaluating");
            match evaluate_prompt(&instruction, ds, client, &cfg.seeds) {
                Ok(results) => record.extend(results.into_iter().map(|result| RunEvent::Evaluation {
                    instruction: instruction.clone(),
                    eval: LabeledEval {
                        model: name.to_string(),
                        reflector: None,
                        result,
                    },
                })),
                Err(e) => {
                    let scope = format!("{name} on {}", ds.name);
                    record.push(RunEvent::Failure {
                        scope: scope.clone(),
                        error: e.to_string(),
                    });
                    failure = Some(CliError::Runtime(format!("{scope}: {e}")));
                    break 'outer;
                }
            }
        }
    }
    persist_run(&record, &record_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(e) = failure {
        return Err(e);
    }

    let metrics_path = out.join(format!("{}.evaluate.metrics.csv", cfg.run_id));
    let rows: Vec<MetricsRow> = record.evaluations().map(MetricsRow::from_eval).collect();
    write_rows(&metrics_path, &rows)?;
    let summary_path = out.join(format!("{}.evaluate.summary.csv", cfg.run_id));
    let cells = summary_rows(record.evaluations());
    write_rows(&summary_path, &cells)?;
    Ok(EvaluateSummary {
        record: record_path,
        metrics: metrics_path,
        summary: summary_path,
        cells,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairingOutcome {
    pub pairing: String,
    pub record: PathBuf,
    /// Present when the search finished.
    pub best_instruction: Option<PathBuf>,
    pub best_val_accuracy: Option<f64>,
    pub calls_used: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeSummary {
    pub pairings: Vec<PairingOutcome>,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub cells: Vec<SummaryRow>,
    pub failures: Vec<String>,
}

struct Shared<'a> {
    cfg: &'a RunConfig,
    registry: &'a BackendRegistry,
    instruction: &'a str,
    feedback: &'a Dataset,
    val: &'a Dataset,
    eval_sets: &'a [Dataset],
    out: &'a Path,
}

fn run_pairing(sh: &Shared<'_>, pairing: &Pairing) -> (PairingOutcome, RunRecord) {
    let spec = sh.cfg.optimize.as_ref().expect("validated");
    let label = pairing.label();
    let record_path = sh.out.join(format!("{}.optimize.{label}.jsonl", sh.cfg.run_id));
    let mut record = RunRecord::new(
        format!("{}.{label}", sh.cfg.run_id),
        "optimize",
        serde_json::json!({"config": config_snapshot(sh.cfg), "pairing": pairing}),
    );
    let mut outcome = PairingOutcome {
        pairing: label.clone(),
        record: record_path.clone(),
        best_instruction: None,
        best_val_accuracy: None,
        calls_used: None,
        error: None,
    };
    let result = (|| -> Result<(), CliError> {
        let reflector = sh.registry.client(sh.cfg, &pairing.reflector)?;
        let inference = sh.registry.client(sh.cfg, &pairing.inference)?;
        let found = optimize(
            &spec.optimizer,
            sh.instruction,
            sh.feedback,
            sh.val,
            &inference,
            &reflector,
            &mut record,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        let best_path = sh.out.join(format!("{}.best_instruction.{label}.txt", sh.cfg.run_id));
        write_file(&best_path, found.best.instruction.as_bytes())?;
        outcome.best_instruction = Some(best_path);
        outcome.best_val_accuracy = found.best.val_accuracy();
        outcome.calls_used = Some(found.calls_used);
        for ds in sh.eval_sets {
            let results = evaluate_prompt(&found.best.instruction, ds, &inference, &spec.eval_seeds)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            record.extend(results.into_iter().map(|result| RunEvent::Evaluation {
                instruction: found.best.instruction.clone(),
                eval: LabeledEval {
                    model: pairing.inference.clone(),
                    reflector: Some(pairing.reflector.clone()),
                    result,
                },
            }));
        }
        Ok(())
    })();
    if let Err(e) = result {
        tracing::warn!(pairing = %label, error = %e, "pairing failed");
        record.push(RunEvent::Failure {
            scope: label,
            error: e.to_string(),
        });
        outcome.error = Some(e.to_string());
    }
    if let Err(e) = persist_run(&record, &record_path) {
        outcome.error.get_or_insert_with(|| e.to_string());
    }
    (outcome, record)
}

/// Runs the search once per pairing. A failing pairing is recorded and the
/// rest still run; the error returned afterwards lists every failure.
pub fn cmd_optimize(
    cfg: &RunConfig,
    registry: &BackendRegistry,
    parallel_pairings: bool,
) -> Result<OptimizeSummary, CliError> {
    cfg.validate()?;
    let spec = cfg
        .optimize
        .as_ref()
        .ok_or_else(|| CliError::Config("no [optimize] section".into()))?;
    if spec.pairings.is_empty() {
        return Err(CliError::Config("optimize: no pairings".into()));
    }
    let pairings: Vec<Pairing> = spec
        .pairings
        .iter()
        .map(|p| parse_pairing(p, cfg.backends.keys()))
        .collect::<Result<_, _>>()?;
    let instruction = cfg.instruction()?;
    let feedback = cfg.load_dataset(&spec.feedback_split)?;
    let val = cfg.load_dataset(&spec.val_split)?;
    let eval_sets: Vec<Dataset> = spec
        .eval_splits
        .iter()
        .map(|s| cfg.load_dataset(s))
        .collect::<Result<_, _>>()?;
    let out = cfg.output_dir();
    ensure_dir(&out)?;

    let shared = Shared {
        cfg,
        registry,
        instruction: &instruction,
        feedback: &feedback,
        val: &val,
        eval_sets: &eval_sets,
        out: &out,
    };
    let results: Vec<(PairingOutcome, RunRecord)> = if parallel_pairings {
        std::thread::scope(|s| {
            let handles: Vec<_> = pairings
                .iter()
                .map(|p| s.spawn(|| run_pairing(&shared, p)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("pairing thread panicked"))
                .collect()
        })
    } else {
        pairings.iter().map(|p| run_pairing(&shared, p)).collect()
    };

    let evals: Vec<&LabeledEval> = results.iter().flat_map(|(_, r)| r.evaluations()).collect();
    let metrics_path = out.join(format!("{}.optimize.metrics.csv", cfg.run_id));
    let rows: Vec<MetricsRow> = evals.iter().map(|e| MetricsRow::from_eval(e)).collect();
    write_rows(&metrics_path, &rows)?;
    let summary_path = out.join(format!("{}.optimize.summary.csv", cfg.run_id));
    let cells = summary_rows(evals.iter().copied());
    write_rows(&summary_path, &cells)?;

    let failures: Vec<String> = results
        .iter()
        .filter_map(|(o, _)| o.error.as_ref().map(|e| format!("{}: {e}", o.pairing)))
        .collect();
    Ok(OptimizeSummary {
        pairings: results.into_iter().map(|(o, _)| o).collect(),
        metrics: metrics_path,
        summary: summary_path,
        cells,
        failures,
    })
}

/// Applies command-line overrides on top of the file config.
pub fn apply_overrides(
    cfg: &mut RunConfig,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    pairings: Vec<String>,
) -> Result<(), CliError> {
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if !pairings.is_empty() {
        match cfg.optimize.as_mut() {
            Some(o) => o.pairings = pairings,
            None => return Err(CliError::Config("--pairing given but config has no [optimize] section".into())),
        }
    }
    Ok(())
}
