use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use notecheck_cli::{
    apply_overrides, cmd_evaluate, cmd_optimize, cmd_report, BackendRegistry, CliError,
    ReportOptions, RunConfig,
};

#[derive(Parser)]
#[command(name = "notecheck", version, about = "Clinical note error detection and instruction optimization")]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Score the task instruction for each configured model and split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Search for better instructions per reflector x inference pairing.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// REFLECTORxINFERENCE; repeatable, replaces the configured list.
        #[arg(long = "pairing")]
        pairings: Vec<String>,
        /// Run pairings concurrently instead of one after another.
        #[arg(long)]
        parallel_pairings: bool,
    },
    /// Build accuracy, delta and confusion tables from run records.
    Report {
        /// Run record files (`*.jsonl`).
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Comma-separated splits for the item-weighted combined column.
        #[arg(long, value_delimiter = ',')]
        combine: Vec<String>,
    },
}

fn load(run: RunArgs, pairings: Vec<String>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&run.config)?;
    let seeds = (!run.seeds.is_empty()).then_some(run.seeds);
    apply_overrides(&mut cfg, run.out, seeds, pairings)?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    let registry = BackendRegistry::new();
    match cli.command {
        Command::Evaluate { run } => {
            let cfg = load(run, Vec::new())?;
            print_json(&cmd_evaluate(&cfg, &registry)?);
        }
        Command::Optimize { run, pairings, parallel_pairings } => {
            let cfg = load(run, pairings)?;
            let summary = cmd_optimize(&cfg, &registry, parallel_pairings)?;
            print_json(&summary);
            if !summary.failures.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{} pairing(s) failed: {}",
                    summary.failures.len(),
                    summary.failures.join("; ")
                )));
            }
        }
        Command::Report { records, out, combine } => {
            let summary = cmd_report(&records, &ReportOptions { out, combine, name: "report".into() })?;
            print!("{}", summary.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(level))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
