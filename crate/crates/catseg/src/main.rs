use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catseg::checkpoint::load_checkpoint;
use catseg::config::{Precision, TrainConfig};
use catseg::error::Error;
use catseg::export::export_attention_records;
use catseg::gradcheck;
use catseg::manifest::{generate_dataset, Split};
use catseg::phantom::PhantomSpec;
use catseg::train::{
    compare_reports, evaluate, forward_volume_with_attention, render_compare_table, resume, train,
};
use catseg::volfile;

#[derive(Parser)]
#[command(name = "catseg", version, about = "Cross-slice attention segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a network from a JSON config (flags override config fields).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write a JSON report.
    Eval(EvalArgs),
    /// Export attention matrices of a stored volume as CSV and PGM files.
    ExportAttention(ExportArgs),
    /// Compare two evaluation reports with rank tests per zone and metric.
    Compare(CompareArgs),
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    patients: usize,
    #[arg(long, default_value_t = 12)]
    slices: usize,
    /// Square in-plane size in voxels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
    /// Train/val/test fractions.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"],
          default_values_t = [0.75, 0.125, 0.125])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(String))]
    precision: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    capture_attention: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = clap::value_parser!(String))]
    split: String,
    /// Report destination (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Override the manifest recorded in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stored volume file (.catv).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// First evaluation report (JSON).
    #[arg(long)]
    a: PathBuf,
    /// Second evaluation report (JSON).
    #[arg(long)]
    b: PathBuf,
}

fn load_report(path: &PathBuf) -> catseg::Result<catseg::metrics::MetricsReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn run(cli: Cli) -> catseg::Result<i32> {
    match cli.command {
        Command::GenData(args) => {
            if args.ratios.len() != 3 {
                return Err(Error::usage("--ratios takes exactly three fractions"));
            }
            let spec = PhantomSpec {
                seed: args.seed,
                patients: args.patients,
                slices: args.slices,
                height: args.size,
                width: args.size,
                noise: args.noise,
                ambiguity: args.ambiguity,
                ..PhantomSpec::default()
            };
            let manifest = generate_dataset(
                &spec,
                (args.ratios[0], args.ratios[1], args.ratios[2]),
                &args.out,
            )?;
            println!(
                "wrote {} patients to {} ({} train / {} val / {} test)",
                manifest.patients.len(),
                args.out.display(),
                manifest.patients_in(Split::Train).len(),
                manifest.patients_in(Split::Val).len(),
                manifest.patients_in(Split::Test).len(),
            );
            Ok(0)
        }
        Command::Train(args) => {
            let mut config = TrainConfig::load(&args.config)?;
            if let Some(v) = args.epochs {
                config.epochs = v;
            }
            if let Some(v) = args.lr {
                config.lr = v;
            }
            if let Some(v) = args.weight_decay {
                config.weight_decay = v;
            }
            if let Some(v) = args.batch {
                config.batch = v;
            }
            if let Some(v) = args.seed {
                config.seed = v;
            }
            if let Some(v) = args.precision {
                config.precision = v.parse::<Precision>()?;
            }
            if let Some(v) = args.manifest {
                config.manifest = v;
            }
            if let Some(v) = args.out_dir {
                config.out_dir = v;
            }
            if let Some(v) = args.capture_attention {
                config.capture_attention = v;
            }
            config.validate()?;

            let outcome = match args.resume {
                Some(path) => {
                    let loaded = load_checkpoint(&path)?;
                    resume(loaded, config.epochs)?
                }
                None => train(&config)?,
            };
            println!(
                "trained to epoch {}, {} parameters, best val dice {:.4}",
                outcome.log.last().map(|l| l.epoch).unwrap_or(0),
                outcome.param_count,
                outcome.best_val_dice,
            );
            println!("final checkpoint: {}", outcome.final_path.display());
            println!("best checkpoint:  {}", outcome.best_path.display());
            Ok(0)
        }
        Command::Eval(args) => {
            let split: Split = args.split.parse()?;
            let loaded = load_checkpoint(&args.checkpoint)?;
            let report = evaluate(
                &loaded,
                split,
                args.manifest.as_deref(),
                Some(args.checkpoint.display().to_string()),
            )?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::json("metrics report", e))?;
            std::fs::write(&args.out, json)
                .map_err(|e| Error::io(args.out.display().to_string(), e))?;
            for zone in ["tz", "pz"] {
                let dice = report.aggregate(zone, "whole", "dice").unwrap();
                println!(
                    "{}: dice {:.4} +/- {:.4} over {} patients",
                    zone, dice.mean, dice.std, dice.n
                );
            }
            println!("report written to {}", args.out.display());
            Ok(0)
        }
        Command::ExportAttention(args) => {
            let loaded = load_checkpoint(&args.checkpoint)?;
            let intensities = volfile::load_image(&args.volume)?;
            let records = forward_volume_with_attention(&loaded, &intensities)?;
            let paths = export_attention_records(&records, &args.out)?;
            println!(
                "exported {} attention matrices ({} files) to {}",
                records.len(),
                paths.len(),
                args.out.display()
            );
            Ok(0)
        }
        Command::Compare(args) => {
            let a = load_report(&args.a)?;
            let b = load_report(&args.b)?;
            let rows = compare_reports(&a, &b)?;
            print!("{}", render_compare_table(&rows));
            Ok(0)
        }
        Command::Gradcheck => {
            let results = gradcheck::run_suite();
            let mut failed = false;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:32} max rel err {:.3e} (tolerance {:.0e})",
                    r.name, r.max_rel_err, r.tolerance
                );
                failed |= !r.passed();
            }
            Ok(if failed { 1 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                // missing files and other environment problems
                Error::Io { .. } => 2,
                // validation problems: bad configs, bad data, bad usage
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
