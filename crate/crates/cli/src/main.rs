//! `sngp`: generate 2D datasets, train SNGP and baseline models, export
//! uncertainty surfaces, evaluate checkpoints and run the oracle suites.
//!
//! Exit codes: 0 ok, 1 I/O or other failure, 2 usage, 3 training diverged,
//! 4 metric incompatible with the model, 5 verification failed.

mod commands;
mod config;
mod error;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sngp::baselines::{ModelVariant, UncertaintyMetric};

use crate::commands::{CompareArgs, EvalArgs, SurfaceArgs};
use crate::config::DatasetKind;
use crate::error::CliError;

const DEFAULT_GRID: &str = "-3,4,-3.5,3.5,100";

#[derive(Parser)]
#[command(name = "sngp", version, about = "Distance-aware uncertainty on 2D benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    #[value(name = "two_moons")]
    TwoMoons,
    #[value(name = "two_ovals")]
    TwoOvals,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::TwoMoons => DatasetKind::TwoMoons,
            DatasetArg::TwoOvals => DatasetKind::TwoOvals,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Variance,
    Margin,
    Ds,
}

impl From<MetricArg> for UncertaintyMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Variance => UncertaintyMetric::Variance,
            MetricArg::Margin => UncertaintyMetric::Margin,
            MetricArg::Ds => UncertaintyMetric::DempsterShafer,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a labelled 2D dataset with its OOD cluster as CSV.
    GenData {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        /// Points per class.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise sd (two_moons only).
        #[arg(long, default_value_t = sngp::data::DEFAULT_MOONS_NOISE)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured variant and write a checkpoint and report.
    Train {
        /// key=value config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to the checkpoint path with `.report.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the effective config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate an uncertainty metric over a regular grid.
    Surface {
        #[arg(long)]
        checkpoint: PathBuf,
        /// x0,x1,y0,y1,n or x0,x1,y0,y1,nx,ny
        #[arg(long, default_value = DEFAULT_GRID, allow_hyphen_values = true)]
        grid: String,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write a grayscale PGM image.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy, calibration and OOD-detection report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labelled dataset CSV; its OOD rows are used unless --ood-data is given.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ood_data: Option<PathBuf>,
        /// OOD score; defaults to the model's native uncertainty.
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run oracle suites; exits 5 naming the first failed property.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: verify::Suite,
    },
    /// Train several variants on one dataset and tabulate their metrics.
    Compare {
        /// Comma-separated variant tags.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_enum)]
        dataset: Option<DatasetArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = DEFAULT_GRID, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            dataset,
            n,
            seed,
            noise,
            out,
        } => commands::gen_data(dataset.into(), n, seed, noise, &out),
        Command::Train {
            config,
            overrides,
            out,
            report,
            print_config,
        } => {
            let cfg = commands::load_config(config.as_deref(), &overrides)?;
            if print_config {
                print!("{}", cfg.echo_text());
                return Ok(());
            }
            commands::train(&cfg, &out, report.as_deref())
        }
        Command::Surface {
            checkpoint,
            grid,
            metric,
            out,
            pgm,
            mc_samples,
            seed,
        } => commands::surface(SurfaceArgs {
            checkpoint: &checkpoint,
            grid: commands::parse_grid(&grid)?,
            metric: metric.into(),
            out: &out,
            pgm: pgm.as_deref(),
            mc_samples,
            seed,
        }),
        Command::Eval {
            checkpoint,
            data,
            ood_data,
            metric,
            out,
            mc_samples,
            seed,
        } => commands::eval(EvalArgs {
            checkpoint: &checkpoint,
            data: &data,
            ood_data: ood_data.as_deref(),
            metric: metric.map(Into::into),
            out: out.as_deref(),
            mc_samples,
            seed,
        }),
        Command::Verify { suite } => verify::run_and_report(suite),
        Command::Compare {
            variants,
            dataset,
            config,
            mut overrides,
            grid,
            out,
        } => {
            if let Some(d) = dataset {
                overrides.push(format!("dataset={}", DatasetKind::from(d).name()));
            }
            let cfg = commands::load_config(config.as_deref(), &overrides)?;
            let variants = variants
                .iter()
                .map(|v| ModelVariant::from_tag(v.trim()).map_err(|e| CliError::Usage(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            commands::compare(CompareArgs {
                cfg,
                variants,
                grid: commands::parse_grid(&grid)?,
                out: out.as_deref(),
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `sngp help` for usage");
            }
            e.exit_code()
        }
    }
}
