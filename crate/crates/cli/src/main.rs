//! `ifrp`: synthesize data, pick styles, train, recover and evaluate.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{EvaluateArgs, StyleSelection, StyleSource, SynthesizeArgs, TrainArgs};
use config::{split_list, RunConfig};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (manifest schema 1, checkpoint format 1, report schema 1)"
);

#[derive(Parser, Debug)]
#[command(name = "ifrp", version = VERSION, about = "Face recovery from stylized portraits")]
struct Cli {
    /// JSON or TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; falls back to the config file, then
    /// to `IFRP_SEED`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter, e.g. `info` or `ifrp_core=debug`.
    #[arg(long, global = true, env = "IFRP_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a paired dataset from face images.
    Synthesize(SynthesizeCli),
    /// Rank styles by distance from real faces and keep the top k.
    SelectStyles(SelectCli),
    /// Train the recovery network on a dataset.
    Train(TrainCli),
    /// Recover faces from portraits with a trained checkpoint.
    Recover(RecoverCli),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateCli),
    /// Run the whole pipeline on generated faces.
    Smoke(SmokeCli),
}

#[derive(Args, Debug)]
struct SynthesizeCli {
    #[arg(long, conflicts_with = "synthetic")]
    sources: Option<PathBuf>,
    /// Use this many generated faces as sources.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_size: Option<usize>,
    /// Comma-separated stylizer ids.
    #[arg(long)]
    styles: Option<String>,
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectCli {
    #[arg(long, conflicts_with_all = ["style_dir", "real_dir"])]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "real_dir")]
    style_dir: Option<PathBuf>,
    #[arg(long, requires = "style_dir")]
    real_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCli {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated styles to train on.
    #[arg(long, conflicts_with = "styles_file")]
    styles: Option<String>,
    /// A `select-styles` output whose selection is used.
    #[arg(long)]
    styles_file: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecoverCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateCli {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-pair metrics as CSV.
    #[arg(long)]
    pairs_csv: Option<PathBuf>,
    /// PNG grid of ground truth, portrait and recovery.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated styles to report as seen.
    #[arg(long)]
    seen: Option<String>,
}

#[derive(Args, Debug)]
struct SmokeCli {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    faces: usize,
    #[arg(long, default_value_t = 50)]
    steps: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e
                .chain()
                .find_map(|c| c.downcast_ref::<ifrp_core::Error>())
                .map_or("runtime", ifrp_core::Error::category);
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let env_seed = match std::env::var("IFRP_SEED") {
        Ok(v) => Some(v.trim().parse::<u64>().with_context(|| format!("IFRP_SEED={v} is not a seed"))?),
        Err(_) => None,
    };
    let seed = cli.seed.or(cfg.seed).or(env_seed).unwrap_or(0);
    cfg.seed = Some(seed);
    match cli.command {
        Command::Synthesize(a) => {
            apply_synthesize(&mut cfg, &a)?;
            log_config("synthesize", &cfg.synthesize);
            commands::synthesize(&SynthesizeArgs {
                sources: a.sources,
                synthetic: a.synthetic,
                out: a.out,
                seed,
                section: cfg.synthesize,
            })?;
        }
        Command::SelectStyles(a) => {
            if let Some(k) = a.k {
                cfg.select_styles.k = k;
            }
            log_config("select-styles", &cfg.select_styles);
            let source = match (a.manifest, a.style_dir, a.real_dir) {
                (Some(m), None, None) => StyleSource::Manifest(m),
                (None, Some(styles), Some(real)) => StyleSource::Dirs { styles, real },
                _ => anyhow::bail!("give --manifest or both --style-dir and --real-dir"),
            };
            commands::select_styles(&source, &cfg.select_styles, &a.out)?;
        }
        Command::Train(a) => {
            let mut train = cfg.train.clone();
            train.seed = seed;
            if let Some(s) = &a.styles {
                train.styles = split_list(s)?;
            }
            if let Some(p) = &a.styles_file {
                train.styles = StyleSelection::load(p)?.selected;
            }
            if let Some(e) = a.epochs {
                train.epochs = e;
            }
            if let Some(s) = a.steps {
                train.max_steps = Some(s);
            }
            if let Some(b) = a.batch_size {
                train.batch_size = b;
            }
            log_config("train", &train);
            commands::train_cmd(&TrainArgs {
                manifest: a.manifest,
                out: a.out,
                resume: a.resume,
                config: train,
            })?;
        }
        Command::Recover(a) => {
            commands::recover_cmd(&a.checkpoint, &a.input, &a.out)?;
        }
        Command::Evaluate(a) => {
            if let Some(k) = a.k {
                cfg.evaluate.k = k;
            }
            if let Some(s) = &a.seen {
                cfg.evaluate.seen_styles = split_list(s)?;
            }
            log_config("evaluate", &cfg.evaluate);
            commands::evaluate_cmd(&EvaluateArgs {
                manifest: a.manifest,
                checkpoint: a.checkpoint,
                out: a.out,
                pairs_csv: a.pairs_csv,
                grid: a.grid,
                section: cfg.evaluate,
            })?;
        }
        Command::Smoke(a) => smoke(&mut cfg, seed, &a)?,
    }
    Ok(())
}

fn apply_synthesize(cfg: &mut RunConfig, a: &SynthesizeCli) -> Result<()> {
    if let Some(s) = a.image_size {
        cfg.synthesize.image_size = s;
    }
    if let Some(s) = &a.styles {
        cfg.synthesize.styles = split_list(s)?;
    }
    if let Some(t) = a.test_count {
        cfg.synthesize.test_count = t;
    }
    Ok(())
}

fn log_config<T: serde::Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(json) => log::info!("{what} config: {json}"),
        Err(e) => log::warn!("cannot serialize {what} config: {e}"),
    }
}

/// synthesize -> select-styles -> train -> recover -> evaluate, all under `out`.
fn smoke(cfg: &mut RunConfig, seed: u64, a: &SmokeCli) -> Result<()> {
    let out = &a.out;
    let data = out.join("data");
    if cfg.synthesize.test_count == 0 {
        cfg.synthesize.test_count = 8.min(a.faces.saturating_sub(1));
    }
    log_config("synthesize", &cfg.synthesize);
    let manifest = commands::synthesize(&SynthesizeArgs {
        sources: None,
        synthetic: Some(a.faces),
        out: data.clone(),
        seed,
        section: cfg.synthesize.clone(),
    })?;

    cfg.select_styles.k = cfg.select_styles.k.min(2).min(manifest.styles.len());
    let manifest_path = data.join(ifrp_core::dataset::MANIFEST_FILE);
    let selection = commands::select_styles(
        &StyleSource::Manifest(manifest_path.clone()),
        &cfg.select_styles,
        &out.join("styles.json"),
    )?;

    let mut train = cfg.train.clone();
    train.seed = seed;
    train.image_size = manifest.image_size;
    train.styles = selection.selected.clone();
    train.max_steps = Some(a.steps);
    train.epochs = train.epochs.max(a.steps);
    log_config("train", &train);
    let ckpt = commands::train_cmd(&TrainArgs {
        manifest: manifest_path.clone(),
        out: out.join("train"),
        resume: None,
        config: train,
    })?;

    commands::recover_cmd(&ckpt, &data.join("sf"), &out.join("recovered"))
        .context("recovering the stylized portraits")?;

    log_config("evaluate", &cfg.evaluate);
    let report = commands::evaluate_cmd(&EvaluateArgs {
        manifest: manifest_path,
        checkpoint: ckpt,
        out: out.join("report.json"),
        pairs_csv: Some(out.join("pairs.csv")),
        grid: Some(out.join("grid.png")),
        section: cfg.evaluate.clone(),
    })?;
    log::info!(
        "smoke run done: {} test pairs, PSNR {:.3} dB",
        report.aggregate.count,
        report.aggregate.psnr
    );
    print_paths(out);
    Ok(())
}

fn print_paths(out: &Path) {
    for p in ["data/manifest.json", "styles.json", "train/metrics.csv", "report.json"] {
        println!("{}", out.join(p).display());
    }
}
