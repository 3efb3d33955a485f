// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: reproducible experiment runs over one run
//! directory.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod commands;
pub mod config;
pub mod render;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "heuristic-forge", version, about = "Train small arithmetic transformers and dissect their MLP neurons")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, env = "HEURISTIC_FORGE_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Checkpoint to analyze instead of the latest one in the run directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory instead of `<out>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate prompt splits.
    GenData(Common),
    /// Train a model and write checkpoints.
    Train(Common),
    /// Print per-split, per-operator accuracy.
    Eval(Common),
    /// Patch attention heads and MLP layers.
    ScanComponents(Common),
    /// Patch single neurons and keep the top ones per layer.
    ScanNeurons(Common),
    /// Linear probes for the answer at every layer and position.
    ProbeGrid(Common),
    /// Faithfulness of the kept-neuron circuit from the probe onset layer on.
    Faithfulness(Common),
    /// Export activation and logit patterns of top neurons.
    Patterns(Common),
    /// Classify kept neurons into heuristics.
    Classify(Common),
    /// Zero all neurons of each heuristic.
    KnockoutHeuristic(Common),
    /// Zero the top neurons associated with each prompt.
    KnockoutPrompt(Common),
    /// Compare heuristic neurons on correct and incorrect prompts.
    FailureAnalysis(Common),
    /// Track heuristic neurons across checkpoints.
    Timeline(Common),
    /// Render pattern CSVs as SVG heatmaps.
    Render {
        /// Pattern CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory; defaults to each input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn context(c: Common) -> heuristic_forge::Result<Context> {
    Ok(Context {
        cfg: RunConfig::load(c.config.as_deref())?,
        out: c.out,
        model: c.model,
        data: c.data,
    })
}

fn dispatch(command: Command) -> heuristic_forge::Result<()> {
    use commands as c;
    let (f, common): (fn(&Context) -> heuristic_forge::Result<()>, Common) = match command {
        Command::Render { inputs, out } => {
            for p in c::render(&inputs, out.as_deref())? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::GenData(x) => (c::gen_data, x),
        Command::Train(x) => (c::train_cmd, x),
        Command::Eval(x) => (c::eval, x),
        Command::ScanComponents(x) => (c::scan_components, x),
        Command::ScanNeurons(x) => (c::scan_neurons, x),
        Command::Faithfulness(x) => (c::faithfulness_cmd, x),
        Command::ProbeGrid(x) => (c::probe_grid_cmd, x),
        Command::Patterns(x) => (c::patterns, x),
        Command::Classify(x) => (c::classify, x),
        Command::KnockoutHeuristic(x) => (c::knockout_heuristic, x),
        Command::KnockoutPrompt(x) => (c::knockout_prompt, x),
        Command::FailureAnalysis(x) => (c::failure, x),
        Command::Timeline(x) => (c::timeline, x),
    };
    f(&context(common)?)
}

/// Parse `argv` (program name first) and run one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    // Work is sequential; the thread cap is accepted and validated.
    let _ = cli.threads;
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
