use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use norf_core::geometry::{read_depth, read_observation};
use norf_pipeline::estimate::{estimate_held_out, estimate_view, Models};
use norf_pipeline::train::Stage;
use norf_pipeline::{dataset, eval, fields, inspect, train, PipelineError, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "norf", about = "Category-level pose and shape from a single view")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset.
    GenDataset {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a triplane per training object with a shared decoder.
    FitTriplanes {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one diffusion stage.
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the stored checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many further steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sample pose and shape hypotheses for the held-out views, or for one observation.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Number of hypotheses; defaults to the configured count.
        #[arg(short = 'n', long)]
        hypotheses: Option<usize>,
        /// Observation stem (`<stem>.json` + `<stem>.f32`) for a single estimate.
        #[arg(long, requires = "out")]
        view: Option<PathBuf>,
        /// Depth map stem registered against each hypothesis.
        #[arg(long, requires = "view")]
        depth: Option<PathBuf>,
        /// Output directory of a single estimate.
        #[arg(long, requires = "view")]
        out: Option<PathBuf>,
    },
    /// Score held-out estimates against ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize artifact files.
    Inspect { paths: Vec<PathBuf> },
}

fn print<T: Serialize>(value: &T) -> Result<(), PipelineError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenDataset { config } => {
            let m = dataset::gen_dataset(&RunConfig::load(&config)?)?;
            println!("{} objects, {} views", m.objects.len(), m.views.len());
        }
        Command::FitTriplanes { config } => print(&fields::fit_triplanes(&RunConfig::load(&config)?)?)?,
        Command::TrainDenoiser {
            config,
            stage,
            resume,
            max_steps,
        } => print(&train::train_denoiser(&RunConfig::load(&config)?, stage, resume, max_steps)?)?,
        Command::Estimate {
            config,
            hypotheses,
            view,
            depth,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            match (view, out) {
                (Some(view), Some(out)) => {
                    let (obs, _) = read_observation(&view)?;
                    let depth = depth.map(|d| read_depth(&d)).transpose()?;
                    let name = view.file_name().map_or("view".into(), |s| s.to_string_lossy().into_owned());
                    let models = Models::load(&cfg)?;
                    let report = estimate_view(
                        &cfg,
                        &models,
                        &name,
                        &obs,
                        depth.as_ref().map(|(d, c)| (d, c)),
                        hypotheses.unwrap_or(cfg.eval.hypotheses),
                        &out,
                    )?;
                    print(&report)?;
                }
                _ => {
                    let reports = estimate_held_out(&cfg, hypotheses)?;
                    println!("{} views estimated", reports.len());
                }
            }
        }
        Command::Eval { config } => print(&eval::evaluate(&RunConfig::load(&config)?)?)?,
        Command::Inspect { paths } => {
            if paths.is_empty() {
                return Err(PipelineError::Validation("no paths given".into()));
            }
            for p in paths {
                println!("{}: {}", p.display(), inspect::describe(&p)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
