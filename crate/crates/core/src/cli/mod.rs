//! Command-line front end. Every command reads and writes artifacts and
//! leaves a `<output>.run.json` manifest next to each output.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, 3 format,
//! 4 provenance. Failures print one JSON line on stderr:
//! `{"error":"<kind>","message":"..."}`.

mod commands;

pub use commands::{
    AbArgs, EstimateShiftArgs, EvaluateArgs, GenDataArgs, GenModelArgs, HeatmapArgs, InterventionArgs, KdeArgs,
    LensArgs, PipelineArgs, ProbeArgs, ProjectionArgs, RecordArgs, SelectHeadsArgs, Subset, SweepArgs,
};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "headshift", version, about = "Cross-lingual attention-head intervention lab")]
pub struct Cli {
    /// Worker threads (default: all cores). Output bytes do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic world model with planted heads.
    GenModel(GenModelArgs),
    /// Generate a presence-task dataset for a model's world.
    GenData(GenDataArgs),
    /// Record masked and standard last-row head outputs.
    Record(RecordArgs),
    /// Train one linear probe per head.
    Probe(ProbeArgs),
    /// Keep the Top-K heads by probe test accuracy.
    SelectHeads(SelectHeadsArgs),
    /// Estimate language shift vectors.
    EstimateShift(EstimateShiftArgs),
    /// Combine a head set and shift vectors into an intervention plan.
    Intervene(InterventionArgs),
    /// Presence-task accuracy per language, with or without a plan.
    Evaluate(EvaluateArgs),
    /// Two-stage alpha/K search on a tuning split.
    Sweep(SweepArgs),
    /// Diagnostics.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Every step end to end into one directory.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Bounding-box attention ratio per layer.
    Ab(AbArgs),
    /// Projections onto a probe's hyperplane normal.
    Projection(ProjectionArgs),
    /// Kernel density curves of projections.
    Kde(KdeArgs),
    /// Probe accuracy heatmap.
    Heatmap(HeatmapArgs),
    /// Per-layer, per-position top-1 lens tokens.
    Logitlens(LensArgs),
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        Error::Format(_) => 3,
        Error::Provenance(_) => 4,
        _ => 1,
    }
}

/// The single stderr line for a failure.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Parse and execute. `--help` and `--version` surface as usage errors
/// carrying the rendered text; [`run_command`] prints them and exits 0.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Usage(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenModel(a) => commands::gen_model(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Record(a) => commands::record(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::SelectHeads(a) => commands::select_heads(&a),
        Command::EstimateShift(a) => commands::estimate_shift(&a),
        Command::Intervene(a) => commands::intervene(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sweep(a) => commands::sweep(&a).map(|_| ()),
        Command::Analyze(Analyze::Ab(a)) => commands::analyze_ab(&a),
        Command::Analyze(Analyze::Projection(a)) => commands::analyze_projection(&a),
        Command::Analyze(Analyze::Kde(a)) => commands::analyze_kde(&a),
        Command::Analyze(Analyze::Heatmap(a)) => commands::analyze_heatmap(&a),
        Command::Analyze(Analyze::Logitlens(a)) => commands::analyze_lens(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

/// Entry point for the binary: runs `argv` and returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                use std::io::Write;
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let err = Error::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", error_line(&err));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
