use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tasml::harness::{cmd_ablate, cmd_bench, cmd_gen_tasks, cmd_run, Ablation, ExperimentConfig};
use tasml::taskgen::Split;
use tasml::TasmlError;

const EPILOGUE: &str = "\
OUTPUT FILES (written to the config's output_dir)
  results.csv   experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s
                One row per variant and seed, then a row with seed `all` holding the
                mean and standard deviation of the per-seed means. `run` reports the
                adapted model as `tasml` and the unadapted initialization as
                `unconditional`. Timing columns read `na` unless record_timing is set.
  traces.csv    experiment,variant,seed,task,step,objective,query_acc_pct
                J+1 rows per test task. objective is the mini-batch objective at that
                step; query_acc_pct is `na` on steps that were not evaluated.
  curve.csv     variant,step,mean_acc_pct,std_acc_pct,n
                Query accuracy per step pooled over tasks and seeds.
  summary.json  Config snapshot and per-seed accuracies with the step-0 baseline.
  checkpoint-seed<S>.bin  Trained system per seed (`run` only).
  ablate-<which>/  The same files for each ablation.
  bench.json    Steps per second and scoring latency (`bench`).

ENVIRONMENT
  TASML_THREADS  Maximum worker threads (default: all cores).
  RUST_LOG       Log level, e.g. info.

EXIT CODES
  0 success, 2 invalid config or arguments, 1 runtime failure.";

#[derive(Parser)]
#[command(name = "tasml", version, about = "Task-adaptive structured meta-learning experiments", after_help = EPILOGUE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, adapt to every test task and write results.
    Run { config: PathBuf },
    /// Compare variants of one design choice.
    Ablate {
        #[arg(long, value_parser = ["kernel", "topm", "beta", "steps", "init"])]
        which: String,
        config: PathBuf,
    },
    /// Measure adaptation throughput and scoring latency.
    Bench { config: PathBuf },
    /// Write the synthetic task distribution as an embedding file.
    GenTasks {
        config: PathBuf,
        /// Output path; `.csv` selects CSV, anything else the binary format.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train", value_parser = ["train", "validation", "test"])]
        split: String,
    },
}

enum Failure {
    Config(TasmlError),
    Runtime(TasmlError),
}

impl From<TasmlError> for Failure {
    fn from(e: TasmlError) -> Self {
        match e {
            TasmlError::ConfigInvalid { .. } => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| {
        Failure::Config(match e {
            TasmlError::Io(io) => TasmlError::config("config", format!("{}: {io}", path.display())),
            other => other,
        })
    })
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("TASML_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(TasmlError::config("TASML_THREADS", format!("expected a positive integer, got `{raw}`"))))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(TasmlError::config("TASML_THREADS", e.to_string())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Run { config } => {
            let exp = load(&config)?;
            let report = cmd_run(&exp)?;
            for r in &report.rows {
                println!(
                    "seed {}: {:.2}% -> {:.2}%",
                    r.seed,
                    100.0 * r.summary.mean_initial_accuracy,
                    100.0 * r.summary.mean_accuracy
                );
            }
            println!("wrote {}", report.output_dir.display());
        }
        Command::Ablate { which, config } => {
            let which: Ablation = which.parse()?;
            let exp = load(&config)?;
            let report = cmd_ablate(&exp, which)?;
            println!("wrote {}", report.output_dir.join("results.csv").display());
        }
        Command::Bench { config } => {
            let exp = load(&config)?;
            let r = cmd_bench(&exp)?;
            match r.steps_per_sec {
                Some((m, s)) => println!("steps/sec: {m:.2} ± {s:.2} over {} tasks (p={}, J={})", r.tasks, r.p, r.steps),
                None => println!("steps/sec: n/a (J=0)"),
            }
            println!(
                "scoring latency: {:.6} ± {:.6} s per target; fit {:.3} s",
                r.scoring_latency_s.0, r.scoring_latency_s.1, r.scoring_fit_s
            );
        }
        Command::GenTasks { config, out, split } => {
            let exp = load(&config)?;
            let split = match split.as_str() {
                "validation" => Split::Validation,
                "test" => Split::Test,
                _ => Split::Train,
            };
            let classes = cmd_gen_tasks(&exp, &out, split)?;
            println!("wrote {classes} classes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
