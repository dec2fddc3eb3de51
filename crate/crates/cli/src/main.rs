use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reflow_core::config::ExperimentConfig;
use reflow_core::harness::{self, exit};

/// Toy flow-matching generator with training-free semantic rectification.
#[derive(Parser)]
#[command(name = "reflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML, or JSON)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed relevant to the command
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides run.output_dir
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write generator and oracle datasets
    MakeData(Common),
    /// Train the velocity field and the oracle
    Train(Common),
    /// Sample trajectories and write metrics
    Sample {
        #[command(flatten)]
        common: Common,
        /// Apply rectification
        #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set, default_value_t = false)]
        guided: bool,
    },
    /// Run the K / window / eta grid
    Sweep(Common),
    /// Render CSVs to SVG
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, value_name = "DIR", default_value = "plots")]
        out: PathBuf,
    },
    /// Run the invariant battery
    Selfcheck {
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
}

enum SeedTarget {
    Dataset,
    Training,
    Runs,
}

fn load_config(c: &Common, target: SeedTarget) -> reflow_core::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        match target {
            SeedTarget::Dataset => cfg.dataset.seed = seed,
            SeedTarget::Training => {
                cfg.velocity.train.seed = seed;
                cfg.oracle.train.seed = seed;
            }
            SeedTarget::Runs => cfg.run.seed_base = seed,
        }
    }
    Ok(cfg)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        _ => f(),
    }
}

fn run(cli: Cli) -> reflow_core::Result<i32> {
    match cli.command {
        Command::MakeData(c) => {
            let cfg = load_config(&c, SeedTarget::Dataset)?;
            let files = harness::cmd_make_data(&cfg)?;
            println!(
                "wrote {} and {}",
                files.generator.display(),
                files.oracle.display()
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c, SeedTarget::Training)?;
            let s = with_jobs(c.jobs, || harness::cmd_train(&cfg))?;
            println!(
                "velocity held-out loss {:.4} (zero field {:.4}); oracle accuracy {:.4}, similarity gap {:.3}",
                s.velocity.heldout_loss, s.velocity.zero_field_loss, s.oracle.heldout_accuracy, s.oracle.similarity_gap
            );
        }
        Command::Sample { common, guided } => {
            let cfg = load_config(&common, SeedTarget::Runs)?;
            let s = with_jobs(common.jobs, || harness::cmd_sample(&cfg, guided))?;
            for r in &s.rows {
                println!(
                    "{} {}: target accuracy {:.3}",
                    r.run_id, r.instruction, r.target_accuracy
                );
            }
            println!("wrote {}", s.metrics_csv.display());
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c, SeedTarget::Runs)?;
            let s = with_jobs(c.jobs, || harness::cmd_sweep(&cfg))?;
            for r in &s.rows {
                println!("{}: target accuracy {:.3}", r.run_id, r.target_accuracy);
            }
            println!("wrote {}", s.sweep_csv.display());
        }
        Command::Plot { csv, out } => {
            for p in harness::cmd_plot(&csv, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Selfcheck { jobs } => {
            let report = with_jobs(jobs, harness::cmd_selfcheck)?;
            print!("{report}");
            return Ok(report.exit_code());
        }
    }
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REFLOW_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::SUCCESS
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
