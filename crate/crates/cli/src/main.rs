use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridmtl::exec::Execution;
use gridmtl::mtl::Weighting;
use gridmtl_cli::commands::{self, EvaluateOptions, LeaveoutMode, LeaveoutOutput, Split, TrainOptions};
use gridmtl_cli::config::RunConfig;
use gridmtl_cli::CliError;

/// Grid security assessment with a multi-task classifier.
///
/// The `GRIDMTL_SEED` environment variable, when set, replaces the `seed`
/// field of the configuration file.
#[derive(Parser)]
#[command(name = "gridmtl", version)]
struct Cli {
    /// Run configuration (strict JSON).
    #[arg(short, long, global = true, default_value = "gridmtl.json")]
    config: PathBuf,
    /// Worker threads for generation and leave-out runs.
    #[arg(short, long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Category,
    Topology,
}

#[derive(Subcommand)]
enum Command {
    /// Sample operating points, simulate every contingency and write labelled datasets.
    Generate,
    /// Train a model on the training split.
    Train {
        /// Override the configured task weighting.
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
        /// Train the joint-decoder baseline instead.
        #[arg(long)]
        baseline: bool,
        /// Artifact name; defaults to `mtl` or `baseline`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Score a trained model, or an external prediction file, on a split.
    Evaluate {
        #[arg(long, default_value = "mtl")]
        name: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// CSV with `sample_id` and four secure-class probabilities.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Leave-one-category-out or leave-one-topology-out study.
    Leaveout {
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Summarise metrics and leave-out results found in the output directory.
    Report {
        /// Also write SVG bar charts.
        #[arg(long)]
        plots: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.config)?;
    let exec = Execution::with_jobs(cli.jobs);
    match cli.command {
        Command::Generate => {
            let out = commands::generate(&cfg, exec)?;
            println!("dataset {}", out.dataset_digest);
            println!("report {}", out.report_digest);
        }
        Command::Train {
            weighting,
            baseline,
            name,
        } => {
            let opts = TrainOptions {
                weighting: weighting.map(|w| match w {
                    WeightingArg::Uniform => Weighting::Uniform,
                    WeightingArg::Adaptive => Weighting::Adaptive,
                }),
                baseline,
                name,
            };
            let out = commands::train(&cfg, &opts)?;
            println!("model {} {}", out.name, out.model_digest);
            println!("report {}", out.report_digest);
        }
        Command::Evaluate {
            name,
            split,
            predictions,
            threshold,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Config("threshold must be in [0, 1]".into()));
            }
            let opts = EvaluateOptions {
                name,
                split: match split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Test => Split::Test,
                },
                predictions,
                threshold,
            };
            let r = commands::evaluate(&cfg, &opts)?;
            print!("{}", r.to_csv());
        }
        Command::Leaveout { mode } => {
            let mode = match mode {
                ModeArg::Category => LeaveoutMode::Category,
                ModeArg::Topology => LeaveoutMode::Topology,
            };
            match commands::leaveout(&cfg, mode, exec)? {
                LeaveoutOutput::Category(t) => print!("{}", t.to_csv()),
                LeaveoutOutput::Topology(r) => print!("{}", r.to_csv()),
            }
        }
        Command::Report { plots } => {
            let r = commands::report(&cfg, plots)?;
            print!("{}", r.markdown);
            for p in r.plots {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
