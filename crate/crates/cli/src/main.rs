use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatgen_core::config::ExperimentConfig;
use splatgen_core::experiment;
use splatgen_core::headmodel::Expression;
use splatgen_core::symgen::Mode;
use splatgen_core::{Error, Result};

/// Reconstructs and evaluates rigged Gaussian head avatars.
#[derive(Parser)]
#[command(name = "splatgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// progressive, random, one-time, no-spatial or no-temporal
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Experiment directory; defaults to <root>/<mode>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a directory of PNG frames.
    Eval {
        #[arg(long)]
        frames: PathBuf,
        /// Reference image for identity consistency.
        #[arg(long)]
        reference: PathBuf,
        /// Ground-truth frame directory for PSNR; the reference is used otherwise.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate completed experiments and check the mode ordering per seed.
    Compare {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        /// Also write the comparison as JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export a run's avatar as a PLY point cloud of Gaussians.
    ExportPly {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pose as unit:amplitude pairs, e.g. jaw_open:0.8,smile:0.3
        #[arg(long, default_value = "")]
        expression: String,
    },
    /// Render a neutral turntable of a run's avatar as PNG frames.
    RenderTurntable {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode `{s}`; expected one of {}", names.join(", "))
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, mode, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let dir = experiment::run_dir(&cfg, out.as_deref());
            log::info!("running {} (seed {}) into {}", cfg.mode.name(), cfg.seed, dir.display());
            let summary = experiment::run(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        }
        Command::Eval { frames, reference, gt, out } => {
            let report = experiment::evaluate_frames(&frames, &reference, gt.as_deref())?;
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            if let Some(out) = out {
                write_text(&out, &(text.clone() + "\n"))?;
            }
            println!("{text}");
        }
        Command::Compare { dirs, json } => {
            let comparison = experiment::compare(&dirs)?;
            if let Some(json) = json {
                write_text(&json, &(serde_json::to_string_pretty(&comparison).expect("serializable") + "\n"))?;
            }
            print!("{}", comparison.to_text());
        }
        Command::ExportPly { run, out, expression } => {
            let expr: Expression = experiment::parse_expression(&expression)?;
            let n = experiment::export_ply(&run, &out, &expr)?;
            println!("wrote {n} gaussians to {}", out.display());
        }
        Command::RenderTurntable { run, out, frames, resolution } => {
            let n = experiment::render_turntable(&run, &out, frames, resolution)?;
            println!("wrote {n} frames to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numerical() {
                3
            } else {
                1
            })
        }
    }
}
