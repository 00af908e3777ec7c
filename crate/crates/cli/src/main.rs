//! `qmoe` command-line entry point.
//!
//! Every subcommand reads a JSON run configuration (`--config`), applies the
//! global overrides and prints its report as JSON on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qmoe::config::{Experiment, RunConfig};
use qmoe::experiment::run;

#[derive(Parser, Debug)]
#[command(name = "qmoe", version, about = "Quantized experts and curiosity-routed mixtures")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path: the model for train commands, the embedding file for
    /// synth-data, the report otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
}

#[derive(Subcommand, Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    /// Train one expert on the configured fold.
    TrainExpert,
    /// Train a mixture with one expert per configured scheme.
    TrainMoe,
    /// Evaluate a saved model on the validation fold.
    Eval,
    /// Train, evaluate and time every bit width across folds.
    Ablation,
    /// Time a saved model (or an untrained expert) and count its operations.
    Bench,
    /// Compare latency spread under uniform and curiosity routing.
    BenchRouting,
    /// Print one routing decision per validation input, as JSON lines.
    RouteTrace,
    /// Mel spectrogram of a WAV file.
    Melspec,
    /// Storage size per scheme, or of a saved model.
    SizeReport,
    /// Paired t, Levene and Spearman tests over a score file.
    Stats,
    /// Write a synthetic labeled embedding file.
    SynthData,
}

impl Command {
    fn experiment(self) -> Experiment {
        match self {
            Command::TrainExpert => Experiment::TrainExpert,
            Command::TrainMoe => Experiment::TrainMoe,
            Command::Eval => Experiment::Eval,
            Command::Ablation => Experiment::Ablation,
            Command::Bench => Experiment::Bench,
            Command::BenchRouting => Experiment::BenchRouting,
            Command::RouteTrace => Experiment::RouteTrace,
            Command::Melspec => Experiment::Melspec,
            Command::SizeReport => Experiment::SizeReport,
            Command::Stats => Experiment::Stats,
            Command::SynthData => Experiment::SynthData,
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        match cli.command {
            Command::TrainExpert | Command::TrainMoe => cfg.model_out = Some(out.clone()),
            Command::SynthData => cfg.embeddings_out = Some(out.clone()),
            _ => cfg.report = Some(out.clone()),
        }
    }
}

fn execute(cli: &Cli) -> qmoe::Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, cli);
    let text = run(cli.command.experiment(), &cfg)?;
    if cli.command == Command::BenchRouting {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
            if let Some(w) = v.get("warning").and_then(|w| w.as_str()) {
                eprintln!("warning: {w}");
            }
        }
    }
    Ok(text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(4),
    }
}
