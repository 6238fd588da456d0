//! `ldt`: data generation, training, evaluation and reports from one config
//! file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldt::decode::{ActionDecoding, DecodePolicy, GoalMode};
use ldt::goals::GoalStrategy;
use ldt::pipeline::{self, Cell, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "ldt", version, about = "Goal-conditioned sequence models for text games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the trajectory dataset, vocabulary and dataset statistics.
    GenData(Common),
    /// Train models; without filters, every configured cell plus the IL
    /// baseline.
    Train {
        #[command(flatten)]
        common: Common,
        /// Goal strategy (RTG, ImR, FinS, AvgRTG); repeatable.
        #[arg(long)]
        strategy: Vec<String>,
        /// Auxiliary-loss weight; repeatable.
        #[arg(long)]
        lambda: Vec<f64>,
        /// Train only the walkthrough-only imitation baseline.
        #[arg(long, conflicts_with_all = ["strategy", "lambda"])]
        il: bool,
    },
    /// Evaluate one checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// tilt:<alpha>, optimal, or fixed:<goal>.
        #[arg(long, default_value = "tilt:10")]
        policy: String,
        /// Pick the most likely candidate action instead of free generation.
        #[arg(long)]
        constrained: bool,
    },
    /// Run the tilt, strategy and lambda ablations plus baselines.
    Report(Common),
    /// gen-data, train and report in one go.
    Reproduce(Common),
}

struct Failure {
    code: &'static str,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: "E_USAGE",
        message: message.into(),
    }
}

fn setup(common: &Common) -> Result<RunConfig, Failure> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let cfg = RunConfig::load(&common.config)?;
    Ok(match common.seed {
        Some(s) => cfg.with_master_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = setup(&common)?;
            let s = pipeline::gen_data(&cfg)?;
            println!(
                "{} trajectories ({}) vocabulary {} tokens, version {}",
                s.manifest.trajectory_count,
                s.manifest.per_game.iter().map(|(g, n)| format!("{g}: {n}")).collect::<Vec<_>>().join(", "),
                s.vocab_size,
                s.vocab_version
            );
        }
        Command::Train {
            common,
            strategy,
            lambda,
            il,
        } => {
            let cfg = setup(&common)?;
            let cells = if il {
                vec![Cell::Imitation]
            } else if strategy.is_empty() && lambda.is_empty() {
                pipeline::cells(&cfg)
            } else {
                let strategies = if strategy.is_empty() {
                    cfg.experiments.strategies.clone()
                } else {
                    strategy
                        .iter()
                        .map(|s| s.parse::<GoalStrategy>().map_err(|e| usage(e.to_string())))
                        .collect::<Result<Vec<_>, _>>()?
                };
                let lambdas = if lambda.is_empty() { vec![cfg.train.lambda] } else { lambda };
                if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
                    return Err(usage(format!("lambda {l} must be non-negative")));
                }
                lambdas
                    .iter()
                    .flat_map(|&lambda| strategies.iter().map(move |&strategy| Cell::Model { strategy, lambda }))
                    .collect()
            };
            for cell in cells {
                let ckpt = pipeline::train_cell(&cfg, &cell)?;
                println!("{}: {} steps -> {}", cell.name(), ckpt.step, pipeline::run_dir(&cfg, &cell).display());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            policy,
            constrained,
        } => {
            let cfg = setup(&common)?;
            let mode: GoalMode = policy.parse().map_err(|e: ldt::decode::PolicyParseError| usage(e.to_string()))?;
            let policy = DecodePolicy {
                mode,
                action_decoding: if constrained { ActionDecoding::Constrained } else { ActionDecoding::Greedy },
            };
            let report = pipeline::eval_checkpoint(&cfg, &checkpoint, policy)?;
            print!("{}", ldt::harness::report_csv(&report));
        }
        Command::Report(common) => {
            let cfg = setup(&common)?;
            let bundle = pipeline::report(&cfg)?;
            print!("{}", bundle.sweep.to_csv());
            println!("reports written to {}", cfg.paths.report_dir.display());
        }
        Command::Reproduce(common) => {
            let cfg = setup(&common)?;
            let (summary, bundle) = pipeline::reproduce(&cfg)?;
            println!("{} trajectories", summary.manifest.trajectory_count);
            print!("{}", bundle.sweep.to_csv());
            println!("reports written to {}", cfg.paths.report_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
