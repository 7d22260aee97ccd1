//! Argument handling for the `fedsynth` binary.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use fedsynth::hfmds::inspect_dump;
use fedsynth::{load_config, run_experiment};

#[derive(Parser, Debug)]
#[command(name = "fedsynth", version, about = "Federated learning with feature-matching data synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarise a synthetic-data dump directory.
    SynthInspect {
        #[arg(long)]
        dump: PathBuf,
    },
}

/// Runs the CLI and returns the process exit status.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Run { config, seed, out: dir } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = dir {
                cfg.output_dir = dir.to_string_lossy().into_owned();
            }
            let manifest = run_experiment(&cfg)?;
            writeln!(out, "final accuracy {:.4}", manifest.final_accuracy)?;
            if let Some(a) = manifest.final_alignment {
                writeln!(out, "final alignment {a:.6}")?;
            }
            for e in &manifest.synthesis_events {
                writeln!(
                    out,
                    "synthesis round {}: {} samples, psnr {:.2} dB (mixup {:.2} dB), {:.1}% improved",
                    e.round,
                    e.size,
                    e.mean_psnr,
                    e.mixup_psnr,
                    100.0 * e.improved_fraction
                )?;
            }
            writeln!(out, "artifacts in {}", cfg.output_dir)?;
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            writeln!(out, "ok: {} for {} rounds on {} clients", cfg.algorithm.name(), cfg.rounds, cfg.clients)?;
        }
        Command::SynthInspect { dump } => {
            let report = inspect_dump(&dump)?;
            writeln!(out, "client,index,psnr_db,loss_drop")?;
            for s in &report.samples {
                writeln!(out, "{},{},{:.4},{:.6}", s.client, s.index, s.psnr, s.loss_drop)?;
            }
            let fmt = |v: Option<f64>, p: usize| v.map_or("n/a".to_string(), |v| format!("{v:.p$}"));
            let round = report.round.map_or("?".to_string(), |r| r.to_string());
            writeln!(out, "round {round}: {} samples", report.samples.len())?;
            writeln!(out, "mean psnr {} dB", fmt(report.mean_psnr(), 2))?;
            writeln!(out, "mean loss drop {}", fmt(report.mean_loss_drop(), 6))?;
            writeln!(out, "improved fraction {}", fmt(report.improved_fraction(), 4))?;
        }
    }
    Ok(())
}
