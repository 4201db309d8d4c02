//! Subcommand implementations. Each is a function of its configuration and
//! inputs; `main` only parses arguments and maps errors to exit codes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use maediff_core::manifest::{build_manifest, manifest_root, DatasetManifest, Split, MANIFEST_FILE};
use maediff_core::tensor_io::{load_image, load_mask, save_image};
use maediff_core::NoiseSchedule;
use maediff_model::checkpoint::{load_checkpoint, save_checkpoint};
use maediff_model::train::TrainRecord;
use maediff_model::{MaeDiffModel, Trainer};
use ndarray::Array2;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{build_report, reconstruct_split, EvalReport, Reconstructor, Scored};
use crate::panels::{compose_panel, write_png};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const OPTIMIZER_STATE: &str = "optimizer.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Generates the phantom dataset; returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, DatasetManifest)> {
    create_dir(out)?;
    let manifest = build_manifest(out, &cfg.data)?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    Ok((out.join(MANIFEST_FILE), manifest))
}

/// Images of a split, without any label data.
pub fn load_split_images(manifest_path: &Path, split: Split) -> Result<Vec<Array2<f32>>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest
        .split(split)
        .map(|e| Ok(load_image(root.join(&e.image))?))
        .collect()
}

/// Builds a model from a checkpoint and returns it with the embedded configuration.
pub fn load_model(path: &Path) -> Result<(MaeDiffModel, RunConfig)> {
    let (tensors, text) = load_checkpoint(path)?;
    let cfg = RunConfig::resolve_str(Some(&text), &[])?;
    let model = MaeDiffModel::new(&cfg.model())?;
    model
        .params()
        .load(&tensors)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((model, cfg))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_val: f64,
    pub best_step: usize,
    pub steps: usize,
    pub records: Vec<TrainRecord>,
}

/// Trains on the healthy training split, validating on healthy validation
/// images. With `resume`, continues from `last.safetensors` and the optimizer
/// state in that directory.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&TrainRecord),
) -> Result<TrainSummary> {
    create_dir(out)?;
    let train = load_split_images(manifest_path, Split::Train)?;
    let val = load_split_images(manifest_path, Split::ValHealthy)?;
    let model = MaeDiffModel::new(&cfg.model())?;
    let sched = NoiseSchedule::linear(&cfg.diffusion)?;
    let mut trainer = Trainer::new(&model, cfg.train.clone(), sched, cfg.simplex)?;
    if let Some(dir) = resume {
        let (tensors, _) = load_checkpoint(&dir.join(LAST_CHECKPOINT))?;
        model
            .params()
            .load(&tensors)
            .map_err(|e| CliError::Config(format!("resume: {e}")))?;
        trainer.load_state(&dir.join(OPTIMIZER_STATE))?;
    }
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log_err = None;
    let outcome = trainer.fit(&train, &val, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        progress(r);
    })?;
    if let Some(e) = log_err {
        return Err(CliError::io(&log_path, e));
    }
    let json = cfg.to_json();
    let best = out.join(BEST_CHECKPOINT);
    save_checkpoint(&best, &outcome.best_params, &json)?;
    save_checkpoint(&out.join(LAST_CHECKPOINT), &model.params().snapshot().map_err(maediff_model::Error::from)?, &json)?;
    trainer.save_state(&out.join(OPTIMIZER_STATE))?;
    Ok(TrainSummary {
        checkpoint: best,
        best_val: outcome.best_val,
        best_step: outcome.best_step,
        steps: outcome.steps,
        records: outcome.records,
    })
}

/// Where reconstructions come from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    /// Stub that returns the ground-truth image.
    Oracle,
}

fn with_reconstructor<T>(
    source: &ModelSource,
    cfg: &RunConfig,
    f: impl FnOnce(&mut Reconstructor<'_>) -> Result<T>,
) -> Result<T> {
    match source {
        ModelSource::Oracle => f(&mut Reconstructor::Oracle),
        ModelSource::Checkpoint(path) => {
            let (mut model, ckpt_cfg) = load_model(path)?;
            if ckpt_cfg.plan != cfg.plan {
                return Err(CliError::Config(format!(
                    "checkpoint plan {:?} differs from configured plan {:?}",
                    ckpt_cfg.plan, cfg.plan
                )));
            }
            f(&mut Reconstructor::Model(&mut model))
        }
    }
}

fn write_outputs(out: &Path, items: &[Scored]) -> Result<()> {
    for s in items {
        let dir = out.join(s.entry.split.name());
        create_dir(&dir)?;
        save_image(dir.join(format!("{}_rec.maed", s.entry.id)), &s.rec)?;
        save_image(dir.join(format!("{}_score.maed", s.entry.id)), &s.score)?;
    }
    Ok(())
}

/// Reconstructs one split and writes `<id>_rec.maed` and `<id>_score.maed`.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    manifest_path: &Path,
    split: Split,
    source: &ModelSource,
    out: &Path,
) -> Result<usize> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    let items = with_reconstructor(source, cfg, |r| reconstruct_split(&manifest, &root, split, r, cfg))?;
    write_outputs(out, &items)?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    Ok(items.len())
}

/// Threshold search on unhealthy validation data, then test metrics.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    manifest_path: &Path,
    source: &ModelSource,
    out: &Path,
    panels: bool,
) -> Result<(PathBuf, EvalReport)> {
    create_dir(out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    for split in [Split::ValUnhealthy, Split::TestUnhealthy] {
        if manifest.split(split).next().is_none() {
            return Err(CliError::Other(format!("manifest has no {} items", split.name())));
        }
    }
    let (val, test_u, test_h) = with_reconstructor(source, cfg, |r| {
        Ok((
            reconstruct_split(&manifest, &root, Split::ValUnhealthy, r, cfg)?,
            reconstruct_split(&manifest, &root, Split::TestUnhealthy, r, cfg)?,
            reconstruct_split(&manifest, &root, Split::TestHealthy, r, cfg)?,
        ))
    })?;
    let report = build_report(&val, &test_u, &test_h, &cfg.postprocess)?;
    for items in [&val, &test_u, &test_h] {
        write_outputs(out, items)?;
    }
    let path = out.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| CliError::io(&path, e))?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    if panels {
        cmd_plot(manifest_path, out, &out.join("panels"))?;
    }
    Ok((path, report))
}

/// Writes a panel for every unhealthy item with saved reconstructions in `eval_dir`.
pub fn cmd_plot(manifest_path: &Path, eval_dir: &Path, out: &Path) -> Result<usize> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    create_dir(out)?;
    let mut n = 0;
    for split in [Split::ValUnhealthy, Split::TestUnhealthy, Split::TestHealthy] {
        for e in manifest.split(split) {
            let dir = eval_dir.join(split.name());
            let rec_path = dir.join(format!("{}_rec.maed", e.id));
            if !rec_path.exists() {
                continue;
            }
            let rec = load_image(&rec_path)?;
            let score = load_image(dir.join(format!("{}_score.maed", e.id)))?;
            let input = load_image(root.join(&e.image))?;
            let truth = load_mask(root.join(&e.anomaly_mask))?;
            let panel = compose_panel(input.view(), rec.view(), score.view(), truth.view())?;
            write_png(&out.join(format!("{}.png", e.id)), &panel)?;
            n += 1;
        }
    }
    Ok(n)
}
