use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lesionforge_cli::commands::{evaluate, gradcheck, prepare, seg, train};
use lesionforge_cli::{CliError, CliResult, ExperimentConfig};

/// Lesion classification experiments: split and rebalance data, train the
/// segmenter and the ensemble heads, evaluate, and check gradients.
#[derive(Parser)]
#[command(name = "lesionforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (flat dotted `key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegAction {
    Train,
    Apply,
}

#[derive(Subcommand)]
enum Command {
    /// Split the manifest, augment minority classes, write class weights.
    Prepare,
    /// Train the dual-encoder segmenter, or write masked images.
    Seg {
        #[arg(value_enum)]
        action: SegAction,
    },
    /// Extract features and train the three heads and the fusion head.
    Train,
    /// Report metrics, ROC curves and timing on the test split.
    Evaluate,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Corrupt the analytic gradient of the named check.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("LESIONFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Validation(format!("LESIONFORGE_THREADS: expected a count, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| CliError::Validation(format!("LESIONFORGE_THREADS: {e}")))
}

fn load(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Validation("--config <path> is required for this command".into()))?;
    ExperimentConfig::load(path, cli.seed, cli.out.as_deref())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match &cli.command {
        Command::Prepare => prepare::run(&load(&cli)?).map(drop),
        Command::Seg { action } => {
            let cfg = load(&cli)?;
            match action {
                SegAction::Train => seg::train(&cfg),
                SegAction::Apply => seg::apply(&cfg),
            }
            .map(drop)
        }
        Command::Train => train::run(&load(&cli)?).map(drop),
        Command::Evaluate => evaluate::run(&load(&cli)?).map(drop),
        Command::Gradcheck { inject_fault } => {
            let cfg = cli.config.as_ref().map(|_| load(&cli)).transpose()?;
            let seed = cfg.as_ref().map_or(cli.seed.unwrap_or(0), |c| c.seed);
            let out = cli.out.clone().or_else(|| cfg.as_ref().map(|c| c.out_dir.clone()));
            gradcheck::run(cfg.as_ref(), seed, out.as_deref(), inject_fault.clone())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
