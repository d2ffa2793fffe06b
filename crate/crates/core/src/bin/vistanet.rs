use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use vistanet::cli::{self, EvalMode, RunConfig};
use vistanet::config::KeyValues;
use vistanet::evaluation::Interpolation;
use vistanet::rng::{set_seed, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "vistanet", version, about = "Bleeding-frame classification, explanation and box post-processing")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// Force serial, bit-reproducible training
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classify,
    Detect,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    AllPoints,
    Coco101,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ensemble described by --config
    Train,
    /// Classify images and write explanation masks
    Predict {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "images", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
    },
    /// Apply Soft-NMS to a directory of detection files
    Softnms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "gaussian")]
        method: String,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        overlap_threshold: f64,
        #[arg(long, default_value_t = 0.001)]
        score_floor: f64,
    },
    /// Score predictions against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_enum, default_value = "all-points")]
        interpolation: Interp,
        /// Write JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_seed(path: Option<&PathBuf>) -> anyhow::Result<Option<u64>> {
    let Some(path) = path else { return Ok(None) };
    let kv = KeyValues::from_file(path)?;
    kv.get("seed").map(|s| s.parse()).transpose().context("seed in config")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = match cli.seed {
        Some(s) => s,
        None => config_seed(cli.config.as_ref())?.unwrap_or(DEFAULT_SEED),
    };
    set_seed(seed);
    match cli.command {
        Command::Synth { count, size, out } => cli::cmd_synth(count, &out, seed, size, cli.force)?,
        Command::Train => {
            let Some(path) = &cli.config else { bail!("train requires --config") };
            let mut cfg = RunConfig::from_file(path)?;
            cfg.train.seed = seed;
            if cli.deterministic {
                cfg.train.deterministic = true;
            }
            if !cli.force && cfg.out_dir.join("member_0.ckpt").exists() {
                bail!("{} already holds checkpoints; pass --force to overwrite", cfg.out_dir.display());
            }
            let outcome = cli::cmd_train(&cfg)?;
            for (p, d) in outcome.checkpoints.iter().zip(&outcome.digests) {
                println!("{} {d}", p.display());
            }
        }
        Command::Predict { checkpoints, images, out, alpha } => {
            let rows = cli::cmd_predict(&checkpoints, &images, &out, alpha)?;
            println!("predicted {} images", rows.len());
        }
        Command::Softnms { input, out, method, sigma, overlap_threshold, score_floor } => {
            let cfg = cli::suppression_from_flags(&method, sigma, overlap_threshold, score_floor)?;
            let (n_in, n_out) = cli::cmd_softnms(&input, &out, &cfg)?;
            println!("input={n_in} output={n_out}");
        }
        Command::Eval { pred, gt, mode, interpolation, out } => {
            let mode = match mode {
                Mode::Classify => EvalMode::Classify,
                Mode::Detect => EvalMode::Detect,
            };
            let interp = match interpolation {
                Interp::AllPoints => Interpolation::AllPoints,
                Interp::Coco101 => Interpolation::Coco101,
            };
            let report = cli::cmd_eval(&pred, &gt, mode, interp)?;
            let json = report.to_json();
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{json}"),
            }
            eprint!("{}", report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
