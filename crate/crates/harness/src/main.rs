//! `eed` — command-line front end for the ensemble-defense pipeline.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use eed_harness::config::{resolve, Overrides};
use eed_harness::pipeline::run_stage;
use eed_harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "eed",
    version,
    about = "Adversarial ensemble laboratory: pretrain, prune, select, train, evaluate"
)]
struct Cli {
    /// Key-value config file; flags below override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for the whole run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage to run, overriding the subcommand.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Evaluation attacks, comma separated (fgsm, pgd).
    #[arg(long, global = true)]
    attack: Option<String>,
    /// Evaluation perturbation budget.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Deployment sparsity target.
    #[arg(long, global = true)]
    sparsity: Option<f64>,
    /// Early-stopping mode: online, exhaustive or off.
    #[arg(long, global = true)]
    die: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially pretrain the base network.
    Pretrain,
    /// Prune the base into a pool of diverse sub-models.
    PrunePool,
    /// Score candidate teams and pick one.
    Select,
    /// Jointly train the selected team.
    TrainEed,
    /// Evaluate clean and robust accuracy of everything on disk.
    Eval,
    /// Evaluate the team under dynamic early stopping.
    DieEval,
    /// Run every stage in order.
    RunAll,
    /// Rebuild metrics.json and report.csv from stored results.
    Report,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::PrunePool => "prune-pool",
            Command::Select => "select",
            Command::TrainEed => "train-eed",
            Command::Eval => "eval",
            Command::DieEval => "die-eval",
            Command::RunAll => "run-all",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Ok(raw) = std::env::var("EED_THREADS") {
        let threads: usize = raw.parse().map_err(|e| {
            HarnessError::Config(format!("EED_THREADS: cannot parse '{raw}': {e}"))
        })?;
        if threads == 0 {
            return Err(HarnessError::Config("EED_THREADS must be >= 1".into()));
        }
        // A second initialization (e.g. in tests) is harmless; the first
        // pool wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let stage = match (&cli.stage, &cli.command) {
        (Some(s), _) => s.clone(),
        (None, Some(c)) => c.stage().to_string(),
        (None, None) => {
            return Err(HarnessError::Config(
                "no stage given: pass a subcommand or --stage".into(),
            ))
        }
    };

    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        attack: cli.attack,
        epsilon: cli.epsilon,
        sparsity: cli.sparsity,
        die: cli.die,
    };
    let cfg = resolve(cli.config.as_deref(), &overrides)?;
    run_stage(&cfg, &stage)
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
