use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trm_lab::experiment::{run_experiment, Experiment, ExperimentConfig, ExperimentError};
use trm_lab::profiler::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

macro_rules! overrides {
    ($($field:ident => $help:literal),* $(,)?) => {
        /// Every config key, settable as a flag of the same name.
        #[derive(Args, Debug, Default, Clone)]
        struct Overrides {
            $( #[arg(long, value_name = "VALUE", help = $help)] $field: Option<String>, )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $( if let Some(v) = &self.$field { out.push((stringify!($field), v.as_str())); } )*
                out
            }
        }
    };
}

overrides! {
    data_root => "Data root (default: $TRM_DATA_ROOT or ./data)",
    train_dir => "Training task directory (default: <data_root>/training)",
    eval_dir => "Evaluation task directory (default: <data_root>/evaluation)",
    weights => "Model weight file",
    output_dir => "Report directory",
    k => "Augmented variants per test input",
    steps => "Recursion steps at inference",
    seed => "Master seed",
    condition => "all | correct | blank | random_mismatch",
    mismatch_seed => "Seed of the mismatched id assignment",
    max_depth => "Deepest recursion step evaluated",
    depths => "Comma-separated depths to report",
    eval_limit => "Evaluate only the first N tasks",
    workers => "Worker threads",
    regime => "both | aug0 | aug1000",
    train_steps => "Optimizer steps",
    nominal_steps => "Nominal schedule length (informational)",
    batch_size => "Training batch size",
    learning_rate => "Learning rate",
    momentum => "SGD momentum",
    clip_norm => "Global gradient-norm clip",
    log_every => "Steps between log lines",
    blank_token_rate => "Probability of training on the blank id token",
    eval_k => "Samples for early Pass@k",
    accuracy_samples => "Records probed for train accuracy",
    model_preset => "toy | paper_scale",
    d_model => "Model width override",
    trunk_layers => "Trunk depth override",
    ffn_mult => "Feed-forward expansion override",
    n_cycles => "Training recursion depth override",
    model_seed => "Initialization seed",
    profile_batch => "Batch size while profiling",
    n_samples => "Timed samples while profiling",
    warmup => "Warmup batches while profiling",
    aug_seed => "Seed for prepared augmentation sets",
    synth_tasks => "Tasks per split for synth-data",
    synth_geometric => "Include geometric rules in synth-data",
}

#[derive(Parser, Debug)]
#[command(name = "trm-lab", version, about = "Tiny recursive model experiments on ARC-style grid tasks")]
struct Cli {
    /// Flat key = value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pass@1 with the full augmentation-and-vote ensemble vs a single canonical pass.
    EvalEnsemble(Overrides),
    /// Pass@1 under correct, blank and mismatched puzzle ids.
    IdAblation(Overrides),
    /// Pass@1 at each recursion depth.
    Trajectory(Overrides),
    /// Train canonical and heavily augmented models and evaluate them early.
    TrainDynamics(Overrides),
    /// Throughput, latency and peak workspace of inference.
    Profile(Overrides),
    /// Write the arc-aug-0 and arc-aug-1000 training sets.
    PrepareData(Overrides),
    /// Write a small synthetic task corpus.
    SynthData(Overrides),
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let (experiment, flags) = match &cli.command {
        Command::EvalEnsemble(o) => (Experiment::EvalEnsemble, o),
        Command::IdAblation(o) => (Experiment::IdAblation, o),
        Command::Trajectory(o) => (Experiment::Trajectory, o),
        Command::TrainDynamics(o) => (Experiment::TrainDynamics, o),
        Command::Profile(o) => (Experiment::Profile, o),
        Command::PrepareData(o) => (Experiment::PrepareData, o),
        Command::SynthData(o) => (Experiment::SynthData, o),
    };
    let mut cfg = ExperimentConfig::new(experiment);
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for (key, value) in flags.pairs() {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = resolve(&cli).and_then(|cfg| run_experiment(&cfg));
    match outcome {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
