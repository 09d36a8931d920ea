//! Tables built from one or more run records.
//!
//! Baseline cells are evaluations without a reflector; optimized cells carry
//! the reflector that produced their instruction. Deltas pair an optimized
//! cell with the baseline of the same inference model and split.

use std::fmt::Write as _;
use std::path::PathBuf;

use notecheck::metrics::{
    delta_report, summarize, weighted_mean, AccuracyCell, ConfusionMatrix, LabeledEval, MismatchedPairing,
    SeedSummary,
};
use notecheck::record::load_run;
use serde::Serialize;

use crate::{ensure_dir, write_file, write_rows, CliError};

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub out: PathBuf,
    /// Splits folded into the item-weighted combined column, e.g.
    /// `ms-test` and `uw-test`.
    pub combine: Vec<String>,
    /// Prefix for the written files.
    pub name: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AbsoluteRow {
    pub pairing: String,
    pub model: String,
    pub reflector: String,
    pub split: String,
    pub n_items: usize,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub display: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfusionRow {
    pub pairing: String,
    pub split: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub malformed: usize,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaTableRow {
    pub reflector: String,
    pub model: String,
    pub split: String,
    pub baseline: f64,
    pub optimized: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub absolute: Vec<AbsoluteRow>,
    pub deltas: Vec<DeltaTableRow>,
    pub mismatched: Vec<MismatchedPairing>,
    pub text: String,
    pub files: Vec<PathBuf>,
}

/// Item-weighted mean over the `combine` splits for every (reflector,
/// model) group that has all of them.
fn combined_cells(cells: &[AccuracyCell], combine: &[String]) -> Result<Vec<AccuracyCell>, CliError> {
    if combine.len() < 2 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut seen: Vec<(&str, Option<&str>)> = Vec::new();
    for c in cells {
        let key = (c.model.as_str(), c.reflector.as_deref());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let parts: Option<Vec<&AccuracyCell>> = combine
            .iter()
            .map(|s| {
                cells
                    .iter()
                    .find(|x| x.model == c.model && x.reflector == c.reflector && &x.split == s)
            })
            .collect();
        let Some(parts) = parts else { continue };
        let weights: Vec<(f64, usize)> = parts.iter().map(|p| (p.summary.mean, p.n_items)).collect();
        let mean = weighted_mean(&weights).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut confusion = ConfusionMatrix::default();
        for p in &parts {
            confusion.merge(&p.confusion);
        }
        out.push(AccuracyCell {
            model: c.model.clone(),
            reflector: c.reflector.clone(),
            split: combine.join("+"),
            n_items: weights.iter().map(|w| w.1).sum(),
            summary: SeedSummary { n: 1, mean, std: None },
            confusion,
        });
    }
    Ok(out)
}

fn absolute(c: &AccuracyCell) -> AbsoluteRow {
    AbsoluteRow {
        pairing: c.pairing_label(),
        model: c.model.clone(),
        reflector: c.reflector.clone().unwrap_or_default(),
        split: c.split.clone(),
        n_items: c.n_items,
        n_seeds: c.summary.n,
        mean: c.summary.mean,
        std: c.summary.std,
        display: c.summary.display(),
    }
}

fn confusion_row(c: &AccuracyCell) -> ConfusionRow {
    let r = c.confusion.rates();
    ConfusionRow {
        pairing: c.pairing_label(),
        split: c.split.clone(),
        tp: c.confusion.tp,
        fp: c.confusion.fp,
        tn: c.confusion.tn,
        fn_: c.confusion.fn_,
        malformed: c.confusion.malformed,
        accuracy: r.accuracy,
        sensitivity: r.sensitivity,
        specificity: r.specificity,
        fpr: r.fpr,
    }
}

/// Rows are pairings, columns splits, cells `mean ± std`.
fn render_table(cells: &[AccuracyCell]) -> String {
    let mut splits: Vec<&str> = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    for c in cells {
        if !splits.contains(&c.split.as_str()) {
            splits.push(&c.split);
        }
        let label = c.pairing_label();
        if !rows.contains(&label) {
            rows.push(label);
        }
    }
    let mut grid: Vec<Vec<String>> = vec![std::iter::once("pairing".to_string())
        .chain(splits.iter().map(|s| s.to_string()))
        .collect()];
    for label in &rows {
        let mut line = vec![label.clone()];
        for s in &splits {
            let cell = cells.iter().find(|c| &c.pairing_label() == label && c.split == *s);
            line.push(cell.map(|c| c.summary.display()).unwrap_or_else(|| "-".into()));
        }
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len())
        .map(|i| grid.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let cols: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(v, w)| format!("{v:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cols.join("  ").trim_end());
    }
    out
}

pub fn cmd_report(records: &[PathBuf], opts: &ReportOptions) -> Result<ReportSummary, CliError> {
    if records.is_empty() {
        return Err(CliError::Config("report needs at least one run record".into()));
    }
    let mut evals: Vec<LabeledEval> = Vec::new();
    for path in records {
        let r = load_run(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        evals.extend(r.evaluations().cloned());
    }
    if evals.is_empty() {
        return Err(CliError::Runtime("records contain no evaluations".into()));
    }
    let mut cells = summarize(&evals);
    cells.extend(combined_cells(&cells, &opts.combine)?);

    let (baseline, optimized): (Vec<AccuracyCell>, Vec<AccuracyCell>) =
        cells.iter().cloned().partition(|c| c.reflector.is_none());
    let delta = if baseline.is_empty() || optimized.is_empty() {
        None
    } else {
        Some(delta_report(&baseline, &optimized))
    };

    let absolute_rows: Vec<AbsoluteRow> = cells.iter().map(absolute).collect();
    let confusion_rows: Vec<ConfusionRow> = cells.iter().map(confusion_row).collect();
    let delta_rows: Vec<DeltaTableRow> = delta
        .as_ref()
        .map(|d| {
            d.rows
                .iter()
                .map(|r| DeltaTableRow {
                    reflector: r.reflector.clone(),
                    model: r.model.clone(),
                    split: r.split.clone(),
                    baseline: r.baseline,
                    optimized: r.optimized,
                    delta: r.delta,
                })
                .collect()
        })
        .unwrap_or_default();
    let has_delta = delta.is_some();
    let mismatched = delta.map(|d| d.mismatched).unwrap_or_default();

    let mut text = String::new();
    let _ = writeln!(text, "Detection accuracy (mean ± sample standard deviation over seeds)");
    text.push_str(&render_table(&cells));
    if !delta_rows.is_empty() {
        let _ = writeln!(text, "\nOptimized minus baseline");
        for r in &delta_rows {
            let _ = writeln!(
                text,
                "{}x{}  {}  {:.3} -> {:.3}  {:+.3}",
                r.reflector, r.model, r.split, r.baseline, r.optimized, r.delta
            );
        }
    }
    for m in &mismatched {
        let _ = writeln!(text, "unpaired: {m}");
    }

    ensure_dir(&opts.out)?;
    let name = if opts.name.is_empty() { "report" } else { opts.name.as_str() };
    let path = |suffix: &str| opts.out.join(format!("{name}.{suffix}"));
    let mut files = vec![path("absolute.csv"), path("confusion.csv"), path("txt")];
    write_rows(&files[0], &absolute_rows)?;
    write_rows(&files[1], &confusion_rows)?;
    write_file(&files[2], text.as_bytes())?;
    if has_delta {
        let p = path("delta.csv");
        write_rows(&p, &delta_rows)?;
        files.push(p);
    }
    Ok(ReportSummary {
        absolute: absolute_rows,
        deltas: delta_rows,
        mismatched,
        text,
        files,
    })
}
