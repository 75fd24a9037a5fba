use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpcad::cli::{self, SplitName};
use cpcad::config::RunConfig;
use cpcad::CpcError;

#[derive(Parser)]
#[command(name = "cpcad", version, about = "Contrastive predictive coding anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `dataset.class`.
    #[arg(long)]
    class: Option<String>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CpcError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(c) = &self.class {
            cfg.dataset.class = c.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.resolve()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset in MVTec layout.
    SynthData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the directional models for one class.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this bundle.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a split and write scores, score maps and heatmaps.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Compute detection and segmentation AUROC.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Directory of raw `.f32` heatmaps; pixel metrics are skipped without it.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Dataset root holding `<class>/ground_truth`.
        #[arg(long)]
        gt: PathBuf,
        /// Average per-image pixel AUROC instead of pooling all pixels.
        #[arg(long)]
        per_image_mean: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render input, heatmap overlay and ground truth side by side.
    Visualize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CpcError> {
    match command {
        Command::SynthData { run } => {
            let cfg = run.resolve()?;
            let dir = cli::cmd_synth_data(&cfg, &cfg.dataset.root)?;
            println!("{}", dir.display());
        }
        Command::Train { run, bundle, epochs } => {
            let mut cfg = run.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg = cfg.resolve()?;
            }
            println!("{}", cli::cmd_train(&cfg, bundle.as_deref())?.display());
        }
        Command::Score { run, bundle, split } => {
            let cfg = run.resolve()?;
            println!("{}", cli::cmd_score(&cfg, &bundle, split)?.display());
        }
        Command::Evaluate {
            scores,
            masks,
            gt,
            per_image_mean,
            out,
        } => {
            let report = cli::cmd_evaluate(&scores, masks.as_deref(), &gt, per_image_mean, &out)?;
            println!("{}", serde_json::to_string_pretty(&report.mean).unwrap_or_default());
        }
        Command::Visualize { image, mask, gt, out } => {
            cli::cmd_visualize(&image, &mask, gt.as_deref(), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
