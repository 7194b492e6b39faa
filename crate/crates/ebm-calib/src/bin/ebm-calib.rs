//! Command-line front end: dataset generation, noise-model training, full
//! experiment runs, and report reconstruction. All substance lives in the
//! library; this binary parses arguments, wires paths, and maps outcomes to
//! exit codes (0 success, 1 runtime or partial failure, 2 config error).

use clap::{Parser, Subcommand};
use ebm_calib::data::{generate_task, save_split};
use ebm_calib::experiment::{
    load_dataset_for, prepare_noise_lm, reconstruct_tradeoff, run, save_noise_lm,
    validate_config, write_tradeoff, ExperimentConfig, ExperimentError, TaskSource,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ebm-calib",
    about = "Joint energy-based training and calibration experiments on synthetic text tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset and write it as JSONL.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Added to the task seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Finetune the noise language model on the configured task's train
    /// split and save it as a reusable checkpoint.
    TrainNoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Run the full experiment: train all methods over all seeds and write
    /// the comparison table plus plot-data CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Rebuild the accuracy-vs-ECE trade-off scatter from the trajectory
    /// files of a finished run.
    Report {
        /// Directory holding the run's output files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seed_offset: u64,
) -> Result<ExperimentConfig, ExitCode> {
    match validate_config(path) {
        Ok(mut cfg) => {
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            for s in &mut cfg.seeds {
                *s = s.wrapping_add(seed_offset);
            }
            Ok(cfg)
        }
        Err(e) => {
            eprintln!("{e}");
            Err(ExitCode::from(2))
        }
    }
}

fn runtime_error(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData {
            config,
            out,
            seed_offset,
        } => {
            let cfg = match load_config(&config, out, 0) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let TaskSource::Spec(mut spec) = cfg.task else {
                eprintln!("config: dataset_path is set; there is nothing to generate");
                return ExitCode::from(2);
            };
            spec.seed = spec.seed.wrapping_add(seed_offset);
            let split = match generate_task(&spec) {
                Ok(s) => s,
                Err(e) => return runtime_error(e.into()),
            };
            if let Err(e) = std::fs::create_dir_all(&cfg.out_dir) {
                return runtime_error(e.into());
            }
            let path = cfg.out_dir.join("dataset.jsonl");
            if let Err(e) = save_split(&path, &split) {
                return runtime_error(e.into());
            }
            println!(
                "wrote {} ({} train / {} dev / {} test)",
                path.display(),
                split.train.len(),
                split.dev.len(),
                split.test.len()
            );
            ExitCode::SUCCESS
        }
        Command::TrainNoise {
            config,
            out,
            seed_offset,
        } => {
            let cfg = match load_config(&config, out, seed_offset) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let split = match load_dataset_for(&cfg) {
                Ok(s) => s,
                Err(e) => return runtime_error(e),
            };
            let (lm, ppls) = match prepare_noise_lm(&cfg, &split) {
                Ok(r) => r,
                Err(e) => return runtime_error(e),
            };
            if let Err(e) = save_noise_lm(&cfg.out_dir, &lm, &ppls) {
                return runtime_error(e);
            }
            print!("held-out perplexity by epoch:");
            for p in &ppls {
                print!(" {p:.3}");
            }
            println!();
            println!("saved noise LM under {}", cfg.out_dir.display());
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            out,
            seed_offset,
        } => {
            let cfg = match load_config(&config, out, seed_offset) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let bundle = match run(&cfg) {
                Ok(b) => b,
                Err(e) => return runtime_error(e),
            };
            match std::fs::read_to_string(cfg.out_dir.join("summary.txt")) {
                Ok(txt) => print!("{txt}"),
                Err(e) => eprintln!("warning: cannot read summary.txt: {e}"),
            }
            if bundle.n_failed() > 0 {
                eprintln!(
                    "{} of {} cells failed; see summary.txt",
                    bundle.n_failed(),
                    bundle.cells.len()
                );
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Command::Report { out } => {
            let rows = match reconstruct_tradeoff(&out) {
                Ok(r) => r,
                Err(e) => return runtime_error(e),
            };
            let path = match write_tradeoff(&out, &rows) {
                Ok(p) => p,
                Err(e) => return runtime_error(e),
            };
            println!("wrote {} ({} points)", path.display(), rows.len());
            ExitCode::SUCCESS
        }
    }
}
