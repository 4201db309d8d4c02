//! Score-map post-processing: median smoothing, brain-mask erosion,
//! thresholding with small-component removal, and the greedy threshold search.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::metrics::dice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// How per-image results are combined into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    PerImage,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub median_kernel: usize,
    pub erosion_cycles: usize,
    pub min_component_size: usize,
    pub connectivity: Connectivity,
    pub threshold_candidates: usize,
    pub dice_averaging: Averaging,
    pub auprc_averaging: Averaging,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            median_kernel: 5,
            erosion_cycles: 3,
            min_component_size: 7,
            connectivity: Connectivity::Eight,
            threshold_candidates: 200,
            dice_averaging: Averaging::PerImage,
            auprc_averaging: Averaging::Pooled,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "postprocess.median_kernel must be odd (got {})",
                self.median_kernel
            )));
        }
        if self.min_component_size == 0 {
            return Err(Error::Config(
                "postprocess.min_component_size must be >= 1".into(),
            ));
        }
        if self.threshold_candidates == 0 {
            return Err(Error::Config(
                "postprocess.threshold_candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `k x k` median with edge replication at the borders.
pub fn median_filter(map: ArrayView2<f32>, k: usize) -> Result<Array2<f32>> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("median kernel must be odd, got {k}")));
    }
    let (h, w) = map.dim();
    let half = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut window = Vec::with_capacity(k * k);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        window.clear();
        for di in -half..=half {
            for dj in -half..=half {
                window.push(map[[clamp(i as isize + di, h), clamp(j as isize + dj, w)]]);
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable_by(mid, f32::total_cmp).1
    }))
}

/// Repeated erosion with a 3x3 cross; pixels outside the frame count as background.
pub fn erode_mask(mask: ArrayView2<bool>, cycles: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut cur = mask.to_owned();
    for _ in 0..cycles {
        let prev = cur.clone();
        let at = |i: isize, j: isize| {
            i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && prev[[i as usize, j as usize]]
        };
        cur = Array2::from_shape_fn((h, w), |(i, j)| {
            let (i, j) = (i as isize, j as isize);
            at(i, j) && at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1)
        });
    }
    cur
}

/// Connected-component labels (0 = background, 1.. in raster order of first pixel)
/// and the size of each component.
pub fn label_components(
    binary: ArrayView2<bool>,
    connectivity: Connectivity,
) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = binary.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !binary[[i, j]] || labels[[i, j]] != 0 {
                continue;
            }
            sizes.push(0);
            let label = sizes.len() as u32;
            labels[[i, j]] = label;
            queue.push_back((i, j));
            while let Some((y, x)) = queue.pop_front() {
                sizes[label as usize - 1] += 1;
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if binary[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = label;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Clears every component with fewer than `min_size` pixels.
pub fn remove_small_components(
    binary: ArrayView2<bool>,
    min_size: usize,
    connectivity: Connectivity,
) -> Array2<bool> {
    let (labels, sizes) = label_components(binary, connectivity);
    labels.mapv(|l| l != 0 && sizes[l as usize - 1] >= min_size)
}

/// Median-filters a raw score map and zeroes it outside the eroded brain mask.
pub fn prepare_score(
    score: ArrayView2<f32>,
    brain_mask: ArrayView2<bool>,
    cfg: &PostprocessConfig,
) -> Result<Array2<f32>> {
    ensure_same_shape(score.shape(), brain_mask.shape())?;
    let smooth = median_filter(score, cfg.median_kernel)?;
    let eroded = erode_mask(brain_mask, cfg.erosion_cycles);
    Ok(Zip::from(&smooth)
        .and(&eroded)
        .map_collect(|&s, &m| if m { s } else { 0.0 }))
}

/// Binarizes `score > threshold` and removes small components.
pub fn segment(score: ArrayView2<f32>, threshold: f32, cfg: &PostprocessConfig) -> Array2<bool> {
    let bin = score.mapv(|s| s > threshold);
    remove_small_components(bin.view(), cfg.min_component_size, cfg.connectivity)
}

/// Mean Dice of segmentations at `threshold`, averaged per image or over the pooled pixels.
pub fn dice_at_threshold(
    scores: &[Array2<f32>],
    labels: &[Array2<bool>],
    threshold: f32,
    cfg: &PostprocessConfig,
) -> Result<f64> {
    let preds: Vec<Array2<bool>> = scores.iter().map(|s| segment(s.view(), threshold, cfg)).collect();
    mean_dice(&preds, labels, cfg.dice_averaging).map(|(m, _)| m)
}

/// Mean and standard deviation of Dice over a set of predictions.
pub fn mean_dice(
    preds: &[Array2<bool>],
    labels: &[Array2<bool>],
    averaging: Averaging,
) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Config(format!(
            "need matching non-empty prediction/label lists ({} vs {})",
            preds.len(),
            labels.len()
        )));
    }
    match averaging {
        Averaging::PerImage => {
            let d: Vec<f64> = preds
                .iter()
                .zip(labels)
                .map(|(p, g)| dice(p.view(), g.view()))
                .collect::<Result<_>>()?;
            Ok(crate::metrics::mean_std(&d))
        }
        Averaging::Pooled => {
            let mut inter = 0usize;
            let mut total = 0usize;
            for (p, g) in preds.iter().zip(labels) {
                ensure_same_shape(p.shape(), g.shape())?;
                for (&a, &b) in p.iter().zip(g.iter()) {
                    inter += (a && b) as usize;
                    total += a as usize + b as usize;
                }
            }
            let d = if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 };
            Ok((d, 0.0))
        }
    }
}

/// Candidate thresholds: `n` evenly spaced nearest-rank quantiles of the pooled scores.
pub fn threshold_candidates(scores: &[Array2<f32>], n: usize) -> Vec<f32> {
    let mut pooled: Vec<f32> = scores.iter().flat_map(|s| s.iter().copied()).collect();
    if pooled.is_empty() || n == 0 {
        return Vec::new();
    }
    pooled.sort_by(f32::total_cmp);
    let last = pooled.len() - 1;
    (0..n)
        .map(|i| {
            let q = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            pooled[(q * last as f64).round() as usize]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f32,
    pub dice: f64,
    pub candidates: Vec<(f32, f64)>,
}

/// Picks the candidate threshold with the highest mean Dice on labelled
/// validation maps. Scores are expected to be already prepared.
pub fn greedy_threshold(
    scores: &[Array2<f32>],
    labels: &[Array2<bool>],
    cfg: &PostprocessConfig,
) -> Result<ThresholdSearch> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Config(
            "threshold search needs a non-empty, matched validation set".into(),
        ));
    }
    for (s, l) in scores.iter().zip(labels) {
        ensure_same_shape(s.shape(), l.shape())?;
    }
    if !labels.iter().any(|l| l.iter().any(|&v| v)) {
        return Err(Error::Undefined(
            "validation labels contain no positives; Dice objective is undefined".into(),
        ));
    }
    let mut best: Option<(f32, f64)> = None;
    let mut evaluated = Vec::new();
    for thr in threshold_candidates(scores, cfg.threshold_candidates) {
        if evaluated.last().is_some_and(|&(t, _)| t == thr) {
            continue;
        }
        let d = dice_at_threshold(scores, labels, thr, cfg)?;
        evaluated.push((thr, d));
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((thr, d));
        }
    }
    let (threshold, dice) = best.expect("at least one candidate");
    Ok(ThresholdSearch {
        threshold,
        dice,
        candidates: evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn median_oracle(map: &Array2<f32>, k: usize) -> Array2<f32> {
        let (h, w) = map.dim();
        let r = (k / 2) as isize;
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut v = Vec::new();
            for di in -r..=r {
                for dj in -r..=r {
                    let y = (i as isize + di).max(0).min(h as isize - 1) as usize;
                    let x = (j as isize + dj).max(0).min(w as isize - 1) as usize;
                    v.push(map[[y, x]]);
                }
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        })
    }

    #[test]
    fn median_cases() {
        let c = Array2::from_elem((7, 7), 0.3f32);
        assert_eq!(median_filter(c.view(), 5).unwrap(), c);
        let mut imp = Array2::<f32>::zeros((9, 9));
        imp[[4, 4]] = 10.0;
        assert!(median_filter(imp.view(), 5).unwrap().iter().all(|&v| v == 0.0));
        assert!(median_filter(imp.view(), 4).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Array2::from_shape_fn((9, 9), |_| rng.random::<f32>());
        assert_eq!(median_filter(r.view(), 3).unwrap(), median_oracle(&r, 3));
    }

    #[test]
    fn erosion_cases() {
        let full = Array2::from_elem((5, 5), true);
        assert_eq!(erode_mask(full.view(), 0), full);
        let e = erode_mask(full.view(), 1);
        for ((i, j), &v) in e.indexed_iter() {
            assert_eq!(v, (1..4).contains(&i) && (1..4).contains(&j));
        }
        assert_eq!(erode_mask(full.view(), 3).iter().filter(|&&v| v).count(), 0);
    }

    #[test]
    fn component_size_boundary() {
        let mut six = Array2::from_elem((10, 10), false);
        for j in 0..6 {
            six[[2, j]] = true;
        }
        assert!(!remove_small_components(six.view(), 7, Connectivity::Eight)
            .iter()
            .any(|&v| v));
        let mut seven = six.clone();
        seven[[3, 5]] = true;
        assert_eq!(remove_small_components(seven.view(), 7, Connectivity::Eight), seven);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(remove_small_components(empty.view(), 7, Connectivity::Eight), empty);
    }

    #[test]
    fn diagonal_neighbours() {
        let mut m = Array2::from_elem((3, 3), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        let (_, sizes8) = label_components(m.view(), Connectivity::Eight);
        assert_eq!(sizes8, vec![2]);
        let (_, sizes4) = label_components(m.view(), Connectivity::Four);
        assert_eq!(sizes4, vec![1, 1]);
    }

    #[test]
    fn separable_threshold_gives_perfect_dice() {
        let cfg = PostprocessConfig {
            min_component_size: 1,
            ..Default::default()
        };
        let labels: Vec<Array2<bool>> = (0..3)
            .map(|k| Array2::from_shape_fn((12, 12), |(i, j)| i >= k + 2 && i < k + 6 && j < 5))
            .collect();
        let scores: Vec<Array2<f32>> = labels
            .iter()
            .map(|l| l.mapv(|v| if v { 0.9 } else { 0.1 }))
            .collect();
        let res = greedy_threshold(&scores, &labels, &cfg).unwrap();
        assert_eq!(res.dice, 1.0);
        assert!(res.threshold >= 0.1 && res.threshold < 0.9);
    }

    #[test]
    fn no_positive_labels_is_an_error() {
        let labels = vec![Array2::from_elem((6, 6), false); 2];
        let scores = vec![Array2::from_elem((6, 6), 0.5f32); 2];
        assert!(matches!(
            greedy_threshold(&scores, &labels, &PostprocessConfig::default()),
            Err(Error::Undefined(_))
        ));
        assert!(greedy_threshold(&[], &[], &PostprocessConfig::default()).is_err());
    }

    #[test]
    fn three_candidates_match_exhaustive() {
        let cfg = PostprocessConfig {
            threshold_candidates: 3,
            min_component_size: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<Array2<f32>> =
            (0..2).map(|_| Array2::from_shape_fn((8, 8), |_| rng.random::<f32>())).collect();
        let labels: Vec<Array2<bool>> = scores
            .iter()
            .map(|s| s.mapv(|v| v > 0.6))
            .collect();
        let res = greedy_threshold(&scores, &labels, &cfg).unwrap();

        let mut pooled: Vec<f32> = scores.iter().flat_map(|s| s.iter().copied()).collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cands = [pooled[0], pooled[64], pooled[127]];
        let mut best = (f32::NAN, -1.0);
        for &t in &cands {
            let mut ds = Vec::new();
            for (s, l) in scores.iter().zip(&labels) {
                let b = s.mapv(|v| v > t);
                let b = remove_small_components(b.view(), 2, Connectivity::Eight);
                ds.push(dice(b.view(), l.view()).unwrap());
            }
            let d = ds.iter().sum::<f64>() / ds.len() as f64;
            if d > best.1 {
                best = (t, d);
            }
        }
        assert_eq!(res.threshold, best.0);
        assert_eq!(res.dice, best.1);
        assert!(res.candidates.iter().all(|&(_, d)| d <= res.dice));
    }

    #[test]
    fn prepare_zeroes_outside_eroded_mask() {
        let score = Array2::from_elem((12, 12), 1.0f32);
        let brain = Array2::from_shape_fn((12, 12), |(i, j)| (2..10).contains(&i) && (2..10).contains(&j));
        let cfg = PostprocessConfig::default();
        let out = prepare_score(score.view(), brain.view(), &cfg).unwrap();
        let eroded = erode_mask(brain.view(), 3);
        for ((i, j), &v) in out.indexed_iter() {
            assert_eq!(v, if eroded[[i, j]] { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn pooled_dice() {
        let p = vec![Array2::from_elem((2, 2), true), Array2::from_elem((2, 2), false)];
        let g = vec![Array2::from_elem((2, 2), true), Array2::from_elem((2, 2), true)];
        let (pooled, _) = mean_dice(&p, &g, Averaging::Pooled).unwrap();
        assert!((pooled - 8.0 / 12.0).abs() < 1e-15);
        let (per, _) = mean_dice(&p, &g, Averaging::PerImage).unwrap();
        assert_eq!(per, 0.5);
    }
}
