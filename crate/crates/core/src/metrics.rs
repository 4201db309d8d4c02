//! Segmentation and reconstruction metrics.

use ndarray::ArrayView2;

use crate::error::{ensure_same_shape, Error, Result};

/// `2|A & B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Area under the precision-recall curve as a step sum: precision at each
/// distinct score threshold times the recall gained there. Tied scores enter
/// together.
pub fn auprc(scores: &[f32], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: vec![labels.len()],
            got: vec![scores.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Undefined("AUPRC needs at least one positive label".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        while i < order.len() && scores[order[i]] == level {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        if recall > prev_recall {
            let precision = tp as f64 / (tp + fp) as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    Ok(area)
}

/// Mean absolute error over the pixels selected by `mask`.
pub fn l1_error(x0: ArrayView2<f32>, rec: ArrayView2<f32>, mask: ArrayView2<bool>) -> Result<f64> {
    ensure_same_shape(x0.shape(), rec.shape())?;
    ensure_same_shape(x0.shape(), mask.shape())?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&a, &b), &m) in x0.iter().zip(rec.iter()).zip(mask.iter()) {
        if m {
            sum += (a as f64 - b as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Undefined("l1 error over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    /// Threshold-sweep oracle: for every distinct score, predict `score >= thr`
    /// and accumulate precision over the recall increments.
    fn ap_oracle(scores: &[f32], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut thresholds: Vec<f32> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev = 0.0;
        let mut area = 0.0;
        for thr in thresholds {
            let (mut tp, mut fp) = (0.0, 0.0);
            for (s, &l) in scores.iter().zip(labels) {
                if *s >= thr {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / pos;
            if recall > prev {
                area += (recall - prev) * tp / (tp + fp);
                prev = recall;
            }
        }
        area
    }

    #[test]
    fn dice_cases() {
        let gt = Array2::from_shape_fn((4, 4), |(i, _)| i < 2);
        assert_eq!(dice(gt.view(), gt.view()).unwrap(), 1.0);
        let other = Array2::from_shape_fn((4, 4), |(i, _)| i >= 2);
        assert_eq!(dice(other.view(), gt.view()).unwrap(), 0.0);
        // half of an 8-pixel gt, no false positives: 2*4 / (4 + 8)
        let half = Array2::from_shape_fn((4, 4), |(i, _)| i == 0);
        assert!((dice(half.view(), gt.view()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dice(empty.view(), empty.view()).unwrap(), 1.0);
        let small = Array2::from_elem((2, 4), false);
        assert!(dice(small.view(), gt.view()).is_err());
    }

    #[test]
    fn auprc_cases() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auprc(&[1.0, 0.0, 1.0], &[true, false, true]).unwrap(), 1.0);
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [true, false, true, false];
        let got = auprc(&s, &l).unwrap();
        assert_eq!(got, ap_oracle(&s, &l));
        assert!((got - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!(auprc(&[0.1, 0.2], &[false, false]).is_err());
        assert!(auprc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn l1_cases() {
        let x = Array2::from_shape_fn((5, 5), |(i, j)| (i * 5 + j) as f32 / 25.0);
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| i > 0 && j > 0);
        assert_eq!(l1_error(x.view(), x.view(), mask.view()).unwrap(), 0.0);
        let shifted = x.mapv(|v| v + 0.01);
        assert!((l1_error(x.view(), shifted.view(), mask.view()).unwrap() - 0.01).abs() < 1e-7);
        let none = Array2::from_elem((5, 5), false);
        assert!(l1_error(x.view(), x.view(), none.view()).is_err());
    }

    proptest! {
        #[test]
        fn auprc_matches_oracle_and_is_rank_invariant(
            data in proptest::collection::vec((0u8..20, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f32> = data.iter().map(|d| d.0 as f32 / 10.0 - 0.5).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let a = auprc(&scores, &labels).unwrap();
            prop_assert!((a - ap_oracle(&scores, &labels)).abs() < 1e-12);
            prop_assert!(a > 0.0 && a <= 1.0);
            let cubed: Vec<f32> = scores.iter().map(|s| s * s * s).collect();
            prop_assert_eq!(a, auprc(&cubed, &labels).unwrap());
        }

        #[test]
        fn dice_in_unit_interval(bits in proptest::collection::vec(any::<(bool, bool)>(), 16)) {
            let p = Array2::from_shape_fn((4, 4), |(i, j)| bits[i * 4 + j].0);
            let g = Array2::from_shape_fn((4, 4), |(i, j)| bits[i * 4 + j].1);
            let d = dice(p.view(), g.view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(g.view(), p.view()).unwrap());
        }
    }
}
