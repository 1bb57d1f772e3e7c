use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocnet_cli::commands::{self, EvalOptions, TrainOptions};
use ocnet_cli::visualize::{self, parse_query};
use ocnet_cli::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "ocnet", version, about = "Object context segmentation toolkit")]
struct Cli {
    /// Run configuration ("key = value" lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's data_dir (gen-data) or out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and val splits.
    GenData,
    /// Train a model and save a checkpoint.
    Train {
        /// Stop after this many completed iterations.
        #[arg(long)]
        stop_at: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report per-class IoU, mIoU and pixel accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to score; defaults to the val split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Ignore eval_scales and flip.
        #[arg(long)]
        single_scale: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// An op or module name, or "all".
        #[arg(default_value = "all")]
        selector: String,
    },
    /// Render object context map rows as heatmaps.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM input image.
        #[arg(long)]
        image: PathBuf,
        /// Query pixel as Y,X; repeatable.
        #[arg(long = "pixel", required = true)]
        pixels: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone();
    let stdout = &mut io::stdout();
    match cli.command {
        Command::GenData => {
            let dir = out.unwrap_or_else(|| cfg.data_dir.clone());
            commands::gen_data(&cfg, &dir)?;
            println!("wrote {} train and {} val samples to {}", cfg.train_size, cfg.val_size, dir.display());
        }
        Command::Train { stop_at, resume } => {
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let report = commands::train(&cfg, &TrainOptions { stop_at, resume }, &dir, stdout)?;
            eprintln!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            single_scale,
        } => {
            let r = commands::eval(&cfg, &checkpoint, &EvalOptions { manifest, single_scale })?;
            print!("{}", commands::format_report(&r));
        }
        Command::Gradcheck { selector } => {
            let passed = commands::gradcheck(&selector, cfg.seed, stdout)?;
            println!("{}", if passed { "PASS" } else { "FAIL" });
            return Ok(passed);
        }
        Command::Visualize {
            checkpoint,
            image,
            pixels,
        } => {
            let queries = pixels.iter().map(|p| parse_query(p)).collect::<Result<Vec<_>>>()?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.join("visualize"));
            for f in visualize::visualize(&cfg, &checkpoint, &image, &queries, &dir)? {
                println!("{}", f.display());
            }
        }
    }
    stdout.flush().map_err(|e| CliError::from(ocnet_core::Error::io("<stdout>", e)))?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
