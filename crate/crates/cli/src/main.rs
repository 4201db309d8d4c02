use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maediff_cli::commands::{
    cmd_evaluate, cmd_gen_data, cmd_plot, cmd_reconstruct, cmd_train, ModelSource,
};
use maediff_cli::{CliError, Result, RunConfig};
use maediff_core::manifest::Split;
use maediff_model::checkpoint::load_checkpoint;

#[derive(Parser)]
#[command(name = "maediff", version, about = "Patch-wise masked diffusion for unsupervised anomaly segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.batch_size=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Use a stub that reconstructs every image perfectly.
    #[arg(long)]
    oracle: bool,
}

impl SourceArgs {
    fn source(&self) -> ModelSource {
        match &self.checkpoint {
            Some(p) => ModelSource::Checkpoint(p.clone()),
            None => ModelSource::Oracle,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded phantom dataset and its manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on healthy images and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of a previous run to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct one split and write reconstructions and score maps.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test-unhealthy", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the threshold on validation data and report test metrics.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write PNG panels.
        #[arg(long)]
        panels: bool,
    },
    /// Render PNG panels from an evaluation or reconstruction directory.
    Plot {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        /// Defaults to `<eval-dir>/panels`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split '{s}'"))
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), &args.overrides)
}

/// Without `--config`, the checkpoint's embedded configuration is the base.
fn resolve_with_checkpoint(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<RunConfig> {
    match (&args.config, checkpoint) {
        (None, Some(ckpt)) => {
            let (_, text) = load_checkpoint(ckpt)?;
            RunConfig::resolve_str(Some(&text), &args.overrides)
        }
        _ => resolve(args),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = resolve(&cfg)?;
            let (path, manifest) = cmd_gen_data(&cfg, &out)?;
            for split in Split::ALL {
                let n = manifest.split(split).count();
                let px: usize = manifest.split(split).map(|e| e.anomaly_pixels).sum();
                println!("{:<15} {n:>4} images  {px:>6} anomalous pixels", split.name());
            }
            println!("manifest: {}", path.display());
        }
        Command::Train { cfg, manifest, out, resume } => {
            let cfg = resolve(&cfg)?;
            let summary = cmd_train(&cfg, &manifest, &out, resume.as_deref(), |r| {
                if let Some(v) = r.val {
                    eprintln!("step {:>6}  val {v:.5}", r.step);
                } else if r.step % 10 == 0 {
                    eprintln!("step {:>6}  loss {:.5}", r.step, r.loss.unwrap_or(f64::NAN));
                }
            })?;
            println!(
                "trained {} steps; best val {:.5} at step {}; checkpoint {}",
                summary.steps,
                summary.best_val,
                summary.best_step,
                summary.checkpoint.display()
            );
        }
        Command::Reconstruct { cfg, source, manifest, split, out } => {
            let cfg = resolve_with_checkpoint(&cfg, source.checkpoint.as_deref())?;
            let n = cmd_reconstruct(&cfg, &manifest, split, &source.source(), &out)?;
            println!("reconstructed {n} {} images into {}", split.name(), out.display());
        }
        Command::Evaluate { cfg, source, manifest, out, panels } => {
            let cfg = resolve_with_checkpoint(&cfg, source.checkpoint.as_deref())?;
            let (path, r) = cmd_evaluate(&cfg, &manifest, &source.source(), &out, panels)?;
            println!(
                "threshold {:.5}  dice {:.4} ± {:.4}  auprc {:.4}  l1 {}",
                r.threshold,
                r.dice_mean,
                r.dice_std,
                r.auprc,
                r.l1_mean.map_or("n/a".into(), |v| format!("{v:.5}"))
            );
            println!("report: {}", path.display());
        }
        Command::Plot { manifest, eval_dir, out } => {
            let out = out.unwrap_or_else(|| eval_dir.join("panels"));
            let n = cmd_plot(&manifest, &eval_dir, &out)?;
            println!("wrote {n} panels to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
