//! `hlspower` command-line driver.

mod commands;
mod failure;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use failure::Failure;
use settings::Settings;

#[derive(Debug, Parser)]
#[command(
    name = "hlspower",
    about = "GNN-based power estimation and design space exploration for HLS designs"
)]
struct Cli {
    /// Root seed; every module derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML settings file merged over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log progress (repeat for more detail). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a graph sample from a DFG and its value trace.
    Construct(ConstructArgs),
    /// Run the construction passes and simulate a DFG into a value trace.
    Trace(TraceArgs),
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Train a model (ensemble by default) with one application held out.
    Train(TrainArgs),
    /// Predict the power of one sample.
    Predict(PredictArgs),
    /// Report per-member and ensemble error on the held-out application.
    Eval(EvalArgs),
    /// Model-guided Pareto exploration of a design space.
    Dse(DseArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["input", "data"]))]
pub struct ConstructArgs {
    /// DFG file.
    #[arg(long = "in", value_name = "DFG", requires_all = ["trace", "out"])]
    pub input: Option<PathBuf>,
    /// Trace file recorded on the constructed graph.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Output sample file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the constructed graph here.
    #[arg(long, value_name = "DFG")]
    pub graph_out: Option<PathBuf>,
    /// Rebuild every `<app>/<id>.sample` under a dataset root from its
    /// `.dfg` and `.trace`.
    #[arg(long, value_name = "ROOT", conflicts_with_all = ["input", "trace", "out", "graph_out"])]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub dfg: PathBuf,
    #[arg(long)]
    pub stimuli: PathBuf,
    #[arg(long)]
    pub iters: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Simulate the graph as given, without the construction passes.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a 200-point design space under `<out>/space`.
    #[arg(long)]
    pub space: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Application held out from training.
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value = "total")]
    pub power: hlspower::PowerKind,
    #[arg(long)]
    pub out: PathBuf,
    /// prop, wo-opt, wo-ef, wo-dir, wo-hetr, wo-md or sgl.
    #[arg(long, default_value = "prop")]
    pub variant: hlspower::Variant,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated ensemble seed labels.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long)]
    pub sample: PathBuf,
    /// Metadata file; defaults to the sample path with a `.meta` extension.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DseArgs {
    /// Dataset-layout directory holding the candidate designs.
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 0.02)]
    pub init: f64,
    #[arg(long, default_value_t = 0.4)]
    pub budget: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Per-iteration CSV; `frontier.csv` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn version_text() -> String {
    use hlspower::{activity, dataset, dfg, interp, model, sample};
    format!(
        "{}\nschemas: {}, {}, {}, {}, {}, {}, {}",
        env!("CARGO_PKG_VERSION"),
        dfg::DFG_SCHEMA,
        interp::STIMULI_SCHEMA,
        activity::TRACE_SCHEMA,
        sample::SAMPLE_SCHEMA,
        dataset::META_SCHEMA,
        model::CHECKPOINT_SCHEMA,
        manifest::MANIFEST_SCHEMA,
    )
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.merge_file(path)?;
    }
    s.merge_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let settings = settings(&cli)?;
    log::debug!("settings: {settings:?}");
    match cli.command {
        Command::Construct(a) => commands::construct(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Synth(a) => commands::synth(&a, &settings),
        Command::Train(a) => commands::train(&a, settings),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Dse(a) => commands::dse(&a, &settings),
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(version_text().into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.category.exit_code() as u8)
        }
    }
}
