use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use notecheck::backend::{FinishReason, Role, ScriptedBackend};
use notecheck::detector::{parse_verdict, EvalResult, ItemResult};
use notecheck::metrics::LabeledEval;
use notecheck::record::{load_run, persist_run, RunEvent, RunRecord};
use notecheck_cli::{cmd_evaluate, cmd_optimize, cmd_report, BackendRegistry, ReportOptions, RunConfig};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/four_rows.jsonl")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn evaluate_config(dir: &Path, data: &Path, seeds: &str) -> RunConfig {
    let body = format!(
        r#"
run_id = "base"
output_dir = "out"
seeds = [{seeds}]

[datasets.fixture]
path = "{}"

[backends.mock]
kind = "scripted"
model = "always-correct"
always = "CORRECT"

[evaluate]
models = ["mock"]
splits = ["fixture"]
"#,
        data.display()
    );
    RunConfig::load(&write_config(dir, &body)).unwrap()
}

#[test]
fn always_correct_scores_half_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = evaluate_config(dir.path(), &fixture(), "0");
    let summary = cmd_evaluate(&cfg, &BackendRegistry::new()).unwrap();
    assert_eq!(summary.cells.len(), 1);
    assert_eq!(summary.cells[0].mean, 0.5);
    let metrics = fs::read_to_string(&summary.metrics).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "model,reflector,split,seed,accuracy,tp,fp,tn,fn,malformed");
    assert_eq!(lines.next().unwrap(), "mock,,fixture,0,0.5,0,0,2,2,0");
}

#[test]
fn three_seeds_three_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = evaluate_config(dir.path(), &fixture(), "0, 1, 2");
    let summary = cmd_evaluate(&cfg, &BackendRegistry::new()).unwrap();
    let record = load_run(&summary.record).unwrap();
    let seeds: Vec<u64> = record.evaluations().map(|e| e.result.seed).collect();
    assert_eq!(seeds, [0, 1, 2]);
    assert_eq!(summary.cells[0].n_seeds, 3);
    assert_eq!(summary.cells[0].display, "0.500 ± 0.000");
}

#[test]
fn evaluate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = cmd_evaluate(&evaluate_config(a.path(), &fixture(), "0,1"), &BackendRegistry::new()).unwrap();
    let rb = cmd_evaluate(&evaluate_config(b.path(), &fixture(), "0,1"), &BackendRegistry::new()).unwrap();
    // the config snapshot holds the fixture path, which is the same for both
    assert_eq!(fs::read(ra.record).unwrap(), fs::read(rb.record).unwrap());
    assert_eq!(fs::read(ra.metrics).unwrap(), fs::read(rb.metrics).unwrap());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_notecheck"))
}

#[test]
fn missing_dataset_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
run_id = "x"
[datasets.gone]
path = "does/not/exist.jsonl"
[backends.mock]
kind = "scripted"
model = "m"
always = "CORRECT"
[evaluate]
models = ["mock"]
splits = ["gone"]
"#,
    );
    let out = bin().arg("evaluate").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("gone"));
}

#[test]
fn binary_evaluate_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
run_id = "cli"
seeds = [0]
[datasets.fixture]
path = "{}"
[backends.mock]
kind = "scripted"
model = "m"
always = "1 Something."
[evaluate]
models = ["mock"]
splits = ["fixture"]
"#,
            fixture().display()
        ),
    );
    let out_dir = dir.path().join("elsewhere");
    let out = bin()
        .args(["evaluate", "--seeds", "4,5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["cells"][0]["n_seeds"], 2);
    assert_eq!(summary["cells"][0]["mean"], 0.5);
    assert!(out_dir.join("cli.evaluate.jsonl").exists());
}

#[test]
fn unknown_backend_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
run_id = "x"
[datasets.a]
path = "a.jsonl"
[backends.mock]
kind = "scripted"
model = "m"
[evaluate]
models = ["nope"]
splits = ["a"]
"#,
    );
    let out = bin().arg("evaluate").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Even rows correct, odd rows carry a "warfarin" error in sentence 1.
fn write_split(dir: &Path, name: &str, n: usize) -> PathBuf {
    let path = dir.join(format!("{name}.jsonl"));
    let rows: String = (0..n)
        .map(|i| {
            let row = if i % 2 == 0 {
                serde_json::json!({"note_id": format!("{name}-{i}"), "text": format!("0|Patient {name}-{i} is stable.\n1|Plan {name}-{i} is discharge."), "error_flag": 0})
            } else {
                serde_json::json!({"note_id": format!("{name}-{i}"), "text": format!("0|Patient {name}-{i} is stable.\n1|Plan {name}-{i} is warfarin overdose."), "error_flag": 1, "error_sentence_id": 1, "corrected_sentence": format!("Plan {name}-{i} is discharge.")})
            };
            format!("{row}\n")
        })
        .collect();
    fs::write(&path, rows).unwrap();
    path
}

fn optimize_config(dir: &Path, pairings: &[&str], budget: usize, extra_backends: &str) -> RunConfig {
    let fb = write_split(dir, "train", 16);
    let val = write_split(dir, "val", 6);
    let test = write_split(dir, "test", 4);
    let pairs = pairings.iter().map(|p| format!("\"{p}\"")).collect::<Vec<_>>().join(", ");
    let body = format!(
        r#"
run_id = "opt"
output_dir = "out"

[datasets.train]
path = "{}"
[datasets.val]
path = "{}"
[datasets.test]
path = "{}"

[backends.r1]
kind = "scripted"
model = "reflector-one"
always = "```\nLook harder.\n```"
[backends.r2]
kind = "scripted"
model = "reflector-two"
always = "```\nCheck each line.\n```"
[backends.i1]
kind = "scripted"
model = "inference-one"
always = "CORRECT"
[backends.i2]
kind = "scripted"
model = "inference-two"
always = "CORRECT"
{extra_backends}

[task]
text = "Find the error."

[optimize]
feedback_split = "train"
val_split = "val"
pairings = [{pairs}]
eval_splits = ["test"]

[optimize.optimizer]
rollout_budget = {budget}
minibatch_size = 4
rng_seed = 5
"#,
        fb.display(),
        val.display(),
        test.display()
    );
    RunConfig::load(&write_config(dir, &body)).unwrap()
}

#[test]
fn two_by_two_grid_writes_four_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = optimize_config(dir.path(), &["r1xi1", "r1xi2", "r2xi1", "r2xi2"], 40, "");
    let summary = cmd_optimize(&cfg, &BackendRegistry::new(), false).unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    let artifacts: Vec<_> = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("opt.best_instruction."))
        .collect();
    assert_eq!(artifacts.len(), 4, "{artifacts:?}");
    for p in &summary.pairings {
        assert!(p.best_instruction.as_ref().unwrap().exists());
    }
    // optimized instructions scored on the eval split, one seed each
    assert_eq!(summary.cells.len(), 4);
    assert!(summary.cells.iter().all(|c| c.split == "test" && c.n_seeds == 1 && !c.reflector.is_empty()));
}

fn magic_registry() -> BackendRegistry {
    let inference = ScriptedBackend::respond(|req| {
        let knows = req.content(Role::System)?.contains("MAGIC");
        let flagged = req.content(Role::User)?.contains("warfarin");
        Some(if knows && flagged { "1 Plan is discharge." } else { "CORRECT" }.to_string())
    });
    let reflector = ScriptedBackend::respond(|req| {
        let body = req.content(Role::User)?;
        Some(if body.contains("## Reward\n0") {
            "```\nFind the error. MAGIC\n```".to_string()
        } else {
            "```\nFind the error again.\n```".to_string()
        })
    });
    let mut reg = BackendRegistry::new();
    reg.insert("i1", Arc::new(inference)).insert("r1", Arc::new(reflector));
    reg
}

#[test]
fn magic_environment_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = optimize_config(dir.path(), &["r1xi1"], 200, "");
    let summary = cmd_optimize(&cfg, &magic_registry(), false).unwrap();
    let p = &summary.pairings[0];
    assert_eq!(p.error, None);
    assert_eq!(p.best_val_accuracy, Some(1.0));
    let text = fs::read_to_string(p.best_instruction.as_ref().unwrap()).unwrap();
    assert!(text.contains("MAGIC"));
    let record = load_run(&p.record).unwrap();
    assert_eq!(record.best_instruction(), Some(text.as_str()));
}

#[test]
fn failing_pairing_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let broken = "[backends.broken]\nkind = \"scripted\"\nmodel = \"empty\"\n";
    let cfg = optimize_config(dir.path(), &["brokenxi1", "r1xi1"], 60, broken);
    let summary = cmd_optimize(&cfg, &magic_registry(), false).unwrap();
    assert_eq!(summary.failures.len(), 1);
    assert!(summary.failures[0].starts_with("brokenxi1"));
    let ok = &summary.pairings[1];
    assert!(ok.error.is_none() && ok.best_instruction.is_some());
    let failed = load_run(&summary.pairings[0].record).unwrap();
    assert_eq!(failed.failures().count(), 1);

    // the binary reports the failure with exit code 2
    let out = bin()
        .args(["optimize", "--config"])
        .arg(dir.path().join("run.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
}

#[test]
fn budget_too_small_reported_per_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = optimize_config(dir.path(), &["r1xi1", "r2xi2"], 3, "");
    let summary = cmd_optimize(&cfg, &BackendRegistry::new(), false).unwrap();
    assert_eq!(summary.failures.len(), 2);
    assert!(summary.failures.iter().all(|f| f.contains("budget")));
}

#[test]
fn parallel_pairings_match_sequential() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pairs = ["r1xi1", "r2xi1"];
    let sa = cmd_optimize(&optimize_config(a.path(), &pairs, 60, ""), &magic_registry(), false).unwrap();
    let sb = cmd_optimize(&optimize_config(b.path(), &pairs, 60, ""), &magic_registry(), true).unwrap();
    for (x, y) in sa.pairings.iter().zip(&sb.pairings) {
        assert_eq!(x.pairing, y.pairing);
        let rx = load_run(&x.record).unwrap();
        let ry = load_run(&y.record).unwrap();
        // config snapshots differ only in temp paths
        assert_eq!(rx.events()[1..], ry.events()[1..]);
    }
}

#[test]
fn pairing_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    optimize_config(dir.path(), &["r1xi1"], 40, "");
    let out = bin()
        .args(["optimize", "--pairing", "r2xi2", "--config"])
        .arg(dir.path().join("run.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/opt.best_instruction.r2xi2.txt").exists());
    assert!(!dir.path().join("out/opt.best_instruction.r1xi1.txt").exists());

    let bad = bin()
        .args(["optimize", "--pairing", "r2xnothing", "--config"])
        .arg(dir.path().join("run.toml"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

/// An evaluation of `n` items with exactly `hits` rewarded, alternating
/// labels so the confusion matrix is populated.
fn synthetic_eval(split: &str, n: usize, hits: usize) -> EvalResult {
    let per_item = (0..n)
        .map(|i| {
            let truth_has_error = i % 2 == 1;
            let hit = i < hits;
            let raw = match (truth_has_error, hit) {
                (true, true) | (false, false) => "1 Fix.",
                _ => "CORRECT",
            };
            ItemResult {
                note_id: format!("{split}-{i}"),
                verdict: parse_verdict(raw),
                reward: u8::from(hit),
                truth_has_error,
                finish_reason: FinishReason::Stop,
            }
        })
        .collect();
    EvalResult::from_items(split, 0, per_item)
}

fn synthetic_record(path: &Path, reflector: Option<&str>, ms_hits: usize, uw_hits: usize) {
    let mut r = RunRecord::new("synthetic", "evaluate", serde_json::Value::Null);
    for (split, n, hits) in [("ms-test", 597, ms_hits), ("uw-test", 328, uw_hits)] {
        r.push(RunEvent::Evaluation {
            instruction: "i".into(),
            eval: LabeledEval {
                model: "gpt-5".into(),
                reflector: reflector.map(str::to_string),
                result: synthetic_eval(split, n, hits),
            },
        });
    }
    persist_run(&r, path).unwrap();
}

#[test]
fn report_combines_and_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.jsonl");
    let opt = dir.path().join("opt.jsonl");
    // 430/597 = 0.720, 189/328 = 0.576; 487/597 = 0.816, 239/328 = 0.729
    synthetic_record(&base, None, 430, 189);
    synthetic_record(&opt, Some("gpt-5"), 487, 239);
    let opts = ReportOptions {
        out: dir.path().join("report"),
        combine: vec!["ms-test".into(), "uw-test".into()],
        name: "report".into(),
    };
    let summary = cmd_report(&[base.clone(), opt], &opts).unwrap();
    let combined: Vec<f64> = summary
        .absolute
        .iter()
        .filter(|r| r.split == "ms-test+uw-test")
        .map(|r| r.mean)
        .collect();
    assert_eq!(combined.len(), 2);
    assert!((combined[0] - 0.669).abs() < 0.0005, "{}", combined[0]);
    assert!((combined[1] - 0.785).abs() < 0.0005, "{}", combined[1]);
    assert_eq!(summary.deltas.len(), 3);
    let ms = summary.deltas.iter().find(|d| d.split == "ms-test").unwrap();
    assert!((ms.delta - (487.0 - 430.0) / 597.0).abs() < 1e-12);
    assert!(summary.text.contains("0.669") && summary.text.contains("0.785"));
    assert!(opts.out.join("report.delta.csv").exists());
    assert!(opts.out.join("report.confusion.csv").exists());

    // a single baseline record gives the absolute table only
    let single = ReportOptions { out: dir.path().join("single"), ..opts };
    let s = cmd_report(&[base], &single).unwrap();
    assert!(s.deltas.is_empty());
    assert!(!single.out.join("report.delta.csv").exists());
    assert!(single.out.join("report.absolute.csv").exists());
}

#[test]
fn report_lists_unpaired_cells() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.jsonl");
    let opt = dir.path().join("opt.jsonl");
    synthetic_record(&base, None, 430, 189);
    let mut r = RunRecord::new("o", "optimize", serde_json::Value::Null);
    r.push(RunEvent::Evaluation {
        instruction: "i".into(),
        eval: LabeledEval {
            model: "qwen3-32b".into(),
            reflector: Some("gpt-5".into()),
            result: synthetic_eval("ms-test", 10, 7),
        },
    });
    persist_run(&r, &opt).unwrap();
    let s = cmd_report(&[base, opt], &ReportOptions { out: dir.path().join("r"), ..Default::default() }).unwrap();
    assert_eq!(s.mismatched.len(), 1);
    assert!(s.text.contains("unpaired"));
}

#[test]
fn report_on_corrupt_record_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    fs::write(&p, "{\"seq\":0").unwrap();
    let out = bin().arg("report").arg(&p).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["demo.toml", "medec.toml"] {
        let cfg = RunConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
}
