//! Reconstruction of manifest splits and the evaluation protocol: threshold
//! search on unhealthy validation maps, then Dice and AUPRC on unhealthy test
//! maps and l1 on healthy test images.

use std::path::Path;

use maediff_core::inference::{reconstruct, Denoiser, OracleDenoiser, ReconstructOptions};
use maediff_core::manifest::{load_entry, DatasetManifest, ManifestEntry, Split};
use maediff_core::metrics::{auprc, dice, l1_error, mean_std};
use maediff_core::postprocess::{greedy_threshold, prepare_score, segment, Averaging};
use maediff_core::seed::derive_seed;
use maediff_core::{NoiseSchedule, PatchPlan, Phantom, PostprocessConfig};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Source of reconstructions.
pub enum Reconstructor<'a> {
    Model(&'a mut dyn Denoiser),
    /// Returns each input unchanged.
    Oracle,
}

/// One reconstructed manifest item.
pub struct Scored {
    pub entry: ManifestEntry,
    pub phantom: Phantom,
    pub rec: Array2<f32>,
    /// Raw `|x0 - x0_rec|`.
    pub score: Array2<f32>,
    /// Median-filtered and brain-masked score.
    pub prepared: Array2<f32>,
}

fn options(cfg: &RunConfig, entry_seed: u64) -> ReconstructOptions {
    let mut o = ReconstructOptions::new(
        cfg.diffusion.t_test,
        cfg.simplex.with_seed(derive_seed(cfg.inference.seed, entry_seed)),
    );
    o.per_patch_noise = cfg.inference.per_patch_noise;
    o.batch_size = cfg.inference.batch_size;
    o
}

/// Reconstructs and scores every item of `split`.
pub fn reconstruct_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    rec: &mut Reconstructor<'_>,
    cfg: &RunConfig,
) -> Result<Vec<Scored>> {
    let sched = NoiseSchedule::linear(&cfg.diffusion)?;
    let plan = PatchPlan::new(cfg.plan)?;
    manifest
        .split(split)
        .map(|entry| {
            let phantom = load_entry(root, entry)?;
            let opts = options(cfg, entry.seed);
            let result = match rec {
                Reconstructor::Model(d) => reconstruct(phantom.image.view(), &mut **d, &sched, &plan, &opts)?,
                Reconstructor::Oracle => {
                    let mut d = OracleDenoiser { image: phantom.image.clone() };
                    reconstruct(phantom.image.view(), &mut d, &sched, &plan, &opts)?
                }
            };
            let prepared = prepare_score(result.score.view(), phantom.brain_mask.view(), &cfg.postprocess)?;
            Ok(Scored {
                entry: entry.clone(),
                phantom,
                rec: result.x0_rec,
                score: result.score,
                prepared,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub dice: Option<f64>,
    pub l1: Option<f64>,
    pub anomaly_pixels: usize,
    pub predicted_pixels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f32,
    /// Dice of the chosen threshold on the validation maps.
    pub val_dice: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub auprc: f64,
    pub l1_mean: Option<f64>,
    pub per_image: Vec<ImageRecord>,
}

/// Prepared score map with its labels.
pub struct LabelledMap<'a> {
    pub id: &'a str,
    pub prepared: &'a Array2<f32>,
    pub label: &'a Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMetrics {
    pub threshold: f32,
    pub val_dice: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub auprc: f64,
    /// Per test image: Dice and predicted pixel count.
    pub per_image: Vec<(f64, usize)>,
}

/// Segmentation metrics given prepared maps; shared by model and baseline runs.
pub fn segmentation_metrics(
    val: &[LabelledMap<'_>],
    test: &[LabelledMap<'_>],
    cfg: &PostprocessConfig,
) -> Result<SegmentationMetrics> {
    if test.is_empty() {
        return Err(CliError::Other("no unhealthy test images to evaluate".into()));
    }
    let val_scores: Vec<Array2<f32>> = val.iter().map(|m| m.prepared.clone()).collect();
    let val_labels: Vec<Array2<bool>> = val.iter().map(|m| m.label.clone()).collect();
    let search = greedy_threshold(&val_scores, &val_labels, cfg)?;
    let preds: Vec<Array2<bool>> = test
        .iter()
        .map(|m| segment(m.prepared.view(), search.threshold, cfg))
        .collect();
    let per: Vec<(f64, usize)> = preds
        .iter()
        .zip(test)
        .map(|(p, m)| Ok((dice(p.view(), m.label.view())?, p.iter().filter(|&&v| v).count())))
        .collect::<Result<_>>()?;
    let labels: Vec<Array2<bool>> = test.iter().map(|m| m.label.clone()).collect();
    let (dice_mean, dice_std) = maediff_core::postprocess::mean_dice(&preds, &labels, cfg.dice_averaging)?;
    let ap = match cfg.auprc_averaging {
        Averaging::Pooled => {
            let scores: Vec<f32> = test.iter().flat_map(|m| m.prepared.iter().copied()).collect();
            let labels: Vec<bool> = test.iter().flat_map(|m| m.label.iter().copied()).collect();
            auprc(&scores, &labels)?
        }
        Averaging::PerImage => {
            let aps: Vec<f64> = test
                .iter()
                .filter(|m| m.label.iter().any(|&v| v))
                .map(|m| {
                    let s: Vec<f32> = m.prepared.iter().copied().collect();
                    let l: Vec<bool> = m.label.iter().copied().collect();
                    auprc(&s, &l)
                })
                .collect::<maediff_core::Result<_>>()?;
            mean_std(&aps).0
        }
    };
    Ok(SegmentationMetrics {
        threshold: search.threshold,
        val_dice: search.dice,
        dice_mean,
        dice_std,
        auprc: ap,
        per_image: per,
    })
}

/// Full report from reconstructed splits.
pub fn build_report(
    val_unhealthy: &[Scored],
    test_unhealthy: &[Scored],
    test_healthy: &[Scored],
    cfg: &PostprocessConfig,
) -> Result<EvalReport> {
    let as_maps = |s: &'_ [Scored]| -> Vec<(String, Array2<f32>, Array2<bool>)> {
        s.iter()
            .map(|x| (x.entry.id.clone(), x.prepared.clone(), x.phantom.anomaly_mask.clone()))
            .collect()
    };
    let val = as_maps(val_unhealthy);
    let test = as_maps(test_unhealthy);
    fn lm(v: &[(String, Array2<f32>, Array2<bool>)]) -> Vec<LabelledMap<'_>> {
        v.iter()
            .map(|(id, p, l)| LabelledMap { id, prepared: p, label: l })
            .collect()
    }
    let m = segmentation_metrics(&lm(&val), &lm(&test), cfg)?;

    let mut per_image = Vec::new();
    for (s, &(d, n)) in test_unhealthy.iter().zip(&m.per_image) {
        per_image.push(ImageRecord {
            id: s.entry.id.clone(),
            split: s.entry.split,
            dice: Some(d),
            l1: Some(l1_error(s.phantom.image.view(), s.rec.view(), s.phantom.brain_mask.view())?),
            anomaly_pixels: s.entry.anomaly_pixels,
            predicted_pixels: Some(n),
        });
    }
    let mut l1s = Vec::new();
    for s in test_healthy {
        let l1 = l1_error(s.phantom.image.view(), s.rec.view(), s.phantom.brain_mask.view())?;
        l1s.push(l1);
        per_image.push(ImageRecord {
            id: s.entry.id.clone(),
            split: s.entry.split,
            dice: None,
            l1: Some(l1),
            anomaly_pixels: 0,
            predicted_pixels: None,
        });
    }
    Ok(EvalReport {
        threshold: m.threshold,
        val_dice: m.val_dice,
        dice_mean: m.dice_mean,
        dice_std: m.dice_std,
        auprc: m.auprc,
        l1_mean: (!l1s.is_empty()).then(|| mean_std(&l1s).0),
        per_image,
    })
}
