//! Command-line surface. Every command prints one JSON report to stdout;
//! failures print an error record instead and exit nonzero, so exit code 0
//! means "report contains no error". `--seed` falls back to the RETRO_SEED
//! environment variable, then to 42.

use clap::{Parser, Subcommand};

mod cmd_analyze;
mod cmd_data;
mod cmd_run;
mod common;

#[derive(Parser)]
#[command(
    name = "retroknn",
    version,
    about = "Retrieval-augmented few-shot classification: stores, training, \
             zero-shot protocols, index benchmarks, memorization analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a self-contained synthetic benchmark (text or feature mode).
    GenSynth(cmd_data::GenSynthArgs),
    /// Parse and validate a dataset bundle, reporting counts and mode.
    Ingest(cmd_data::IngestArgs),
    /// Encode a labeled dataset into a persisted key-value store.
    BuildStore(cmd_data::BuildStoreArgs),
    /// Train the encoder with retrieval guidance across seeds.
    Train(cmd_run::TrainArgs),
    /// Evaluate a split with neighbor interpolation and demonstrations.
    Eval(cmd_run::EvalArgs),
    /// Zero-shot protocol: pseudo-label a pool, retrieve, never update.
    PseudoZeroShot(cmd_run::PseudoZeroShotArgs),
    /// Sweep beta, lambda, or k; emits a CSV curve alongside the report.
    Sweep(cmd_run::SweepArgs),
    /// Measure IVF recall and throughput against the exact flat index.
    BenchIndex(cmd_analyze::BenchIndexArgs),
    /// Influence-function memorization scores for trained variants.
    Memorize(cmd_analyze::MemorizeArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => cmd_data::gen_synth(args),
        Command::Ingest(args) => cmd_data::ingest(args),
        Command::BuildStore(args) => cmd_data::build_store(args),
        Command::Train(args) => cmd_run::train(args),
        Command::Eval(args) => cmd_run::eval(args),
        Command::PseudoZeroShot(args) => cmd_run::pseudo_zero_shot(args),
        Command::Sweep(args) => cmd_run::sweep(args),
        Command::BenchIndex(args) => cmd_analyze::bench_index(args),
        Command::Memorize(args) => cmd_analyze::memorize(args),
    };
    if let Err(err) = result {
        common::emit_error(&err);
        std::process::exit(1);
    }
}
