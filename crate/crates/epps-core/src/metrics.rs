//! Binary segmentation metrics: mean DSC, mean IoU, recall, and precision.
//!
//! Predictions are thresholded, confusion counts are taken per image, each
//! metric is computed per image with a small additive guard, and the report
//! holds the means over images.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{EppsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive guard keeping ratios finite when an image has no foreground.
pub const METRIC_EPS: f64 = 1e-7;

/// Default probability threshold; pixels strictly above it count as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Mean metrics over a set of images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mdsc: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub n_images: usize,
    pub threshold: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mDSC {:.3} | mIoU {:.3} | Recall {:.3} | Precision {:.3} ({} images, threshold {})",
            self.mdsc, self.miou, self.recall, self.precision, self.n_images, self.threshold
        )
    }
}

/// Thresholds probabilities into a 0/1 map; strictly-above counts as 1.
pub fn binarize<S: Scalar>(probs: &Tensor<S>, threshold: f64) -> Tensor<S> {
    probs.map(|v| {
        if v.cast_f64() > threshold {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// Pixelwise confusion counts (TP, FP, FN, TN) over two binary tensors.
pub fn confusion<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<(u64, u64, u64, u64)> {
    if pred.shape() != gt.shape() {
        return Err(EppsError::shape(format!(
            "confusion counts need matching shapes, got {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (i, (p, g)) in pred.iter().zip(gt.iter()).enumerate() {
        let p = as_bit(p.cast_f64(), "prediction", i)?;
        let g = as_bit(g.cast_f64(), "ground truth", i)?;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((tp, fp, fn_, tn))
}

fn as_bit(x: f64, what: &str, index: usize) -> Result<bool> {
    if x == 0.0 {
        Ok(false)
    } else if x == 1.0 {
        Ok(true)
    } else {
        Err(EppsError::config(format!(
            "{what} must be binary, found {x} at flat index {index}"
        )))
    }
}

/// Per-image metrics from confusion counts, with the ε guard.
fn image_metrics(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64, f64) {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let dsc = (2.0 * tp + METRIC_EPS) / (2.0 * tp + fp + fn_ + METRIC_EPS);
    let iou = (tp + METRIC_EPS) / (tp + fp + fn_ + METRIC_EPS);
    let recall = (tp + METRIC_EPS) / (tp + fn_ + METRIC_EPS);
    let precision = (tp + METRIC_EPS) / (tp + fp + METRIC_EPS);
    (dsc, iou, recall, precision)
}

/// Thresholds each prediction, scores it against its ground truth, and
/// averages the per-image metrics.
///
/// Errors on empty inputs, length mismatch, or any shape mismatch (naming the
/// offending pair index). Ground truths must be binary; predictions may be
/// arbitrary probabilities.
pub fn compute_metrics<S: Scalar>(
    preds: &[Tensor<S>],
    gts: &[Tensor<S>],
    threshold: f64,
) -> Result<MetricsReport> {
    if preds.is_empty() || gts.is_empty() {
        return Err(EppsError::config("compute_metrics needs at least one image"));
    }
    if preds.len() != gts.len() {
        return Err(EppsError::config(format!(
            "got {} predictions but {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let (mut mdsc, mut miou, mut recall, mut precision) = (0.0, 0.0, 0.0, 0.0);
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if pred.shape() != gt.shape() {
            return Err(EppsError::shape(format!(
                "pair {i}: prediction {:?} does not match ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let bin = binarize(pred, threshold);
        let (tp, fp, fn_, _tn) = confusion(&bin, gt)?;
        let (d, j, r, p) = image_metrics(tp, fp, fn_);
        mdsc += d;
        miou += j;
        recall += r;
        precision += p;
    }
    let n = preds.len() as f64;
    Ok(MetricsReport {
        mdsc: mdsc / n,
        miou: miou / n,
        recall: recall / n,
        precision: precision / n,
        n_images: preds.len(),
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn binarize_uses_strict_inequality() {
        let t = tensor(&[4], vec![0.7, 0.5, 0.500001, 0.0]);
        let b = binarize(&t, 0.5);
        assert_eq!(b.as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        let b0 = binarize(&t, 0.0);
        assert_eq!(b0.as_slice(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn confusion_counts_match_hand_cases() {
        // Perfect prediction with 5 foreground pixels of 16.
        let gt = tensor(&[16], (0..16).map(|i| f64::from(u8::from(i < 5))).collect());
        assert_eq!(confusion(&gt, &gt).unwrap(), (5, 0, 0, 11));

        // Complement prediction has no true pixels of either kind.
        let comp = gt.map(|v| 1.0 - v);
        let (tp, fp, fn_, tn) = confusion(&comp, &gt).unwrap();
        assert_eq!((tp, tn), (0, 0));
        assert_eq!((fp, fn_), (11, 5));

        // Half-overlapping stripes on a 4x4 grid.
        let pred = tensor(&[4, 4], (0..16).map(|i| f64::from(u8::from(i / 4 < 2))).collect());
        let gt = tensor(
            &[4, 4],
            (0..16)
                .map(|i| f64::from(u8::from(i / 4 >= 1 && i / 4 <= 2)))
                .collect(),
        );
        assert_eq!(confusion(&pred, &gt).unwrap(), (4, 4, 4, 4));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<_> = (0..3)
            .map(|k| tensor(&[4, 4], (0..16).map(|i| f64::from(u8::from(i % (k + 2) == 0))).collect()))
            .collect();
        let preds: Vec<_> = gts.iter().map(|g| g.map(|v| v * 0.9 + 0.05)).collect();
        let report = compute_metrics(&preds, &gts, 0.5).unwrap();
        assert!((report.mdsc - 1.0).abs() < 1e-6);
        assert!((report.miou - 1.0).abs() < 1e-6);
        assert!((report.recall - 1.0).abs() < 1e-6);
        assert!((report.precision - 1.0).abs() < 1e-6);
        assert_eq!(report.n_images, 3);
    }

    #[test]
    fn half_overlap_matches_the_formulas() {
        let pred = tensor(&[4, 4], (0..16).map(|i| f64::from(u8::from(i / 4 < 2))).collect());
        let gt = tensor(
            &[4, 4],
            (0..16)
                .map(|i| f64::from(u8::from(i / 4 >= 1 && i / 4 <= 2)))
                .collect(),
        );
        let report = compute_metrics(&[pred], &[gt], 0.5).unwrap();
        assert!((report.mdsc - 0.5).abs() < 1e-6);
        assert!((report.miou - 1.0 / 3.0).abs() < 1e-6);
        assert!((report.recall - 0.5).abs() < 1e-6);
        assert!((report.precision - 0.5).abs() < 1e-6);
    }

    #[test]
    fn empty_images_score_one_under_the_guard() {
        let zeros = tensor(&[8], vec![0.0; 8]);
        let report = compute_metrics(&[zeros.clone()], &[zeros], 0.5).unwrap();
        assert!((report.mdsc - 1.0).abs() < 1e-6);
        assert!((report.miou - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors_name_the_problem() {
        let a = tensor(&[4], vec![0.0; 4]);
        let b = tensor(&[5], vec![0.0; 5]);
        assert!(compute_metrics::<f64>(&[], &[], 0.5).is_err());
        assert!(compute_metrics(&[a.clone()], &[a.clone(), b.clone()], 0.5).is_err());
        let err = compute_metrics(&[a.clone(), a.clone()], &[a, b], 0.5).unwrap_err();
        assert!(err.to_string().contains("pair 1"), "got: {err}");
    }

    #[test]
    fn display_echoes_the_reference_row() {
        let report = MetricsReport {
            mdsc: 0.930,
            miou: 0.876,
            recall: 0.933,
            precision: 0.939,
            n_images: 100,
            threshold: 0.5,
        };
        let line = report.to_string();
        for needle in ["0.930", "0.876", "0.933", "0.939"] {
            assert!(line.contains(needle), "missing {needle} in {line}");
        }
        let json = serde_json::to_string(&report).unwrap();
        for key in ["mdsc", "miou", "recall", "precision", "n_images", "threshold"] {
            assert!(json.contains(key));
        }
    }

    /// Explicit pixel-set oracle: loops over pixels, building intersection
    /// and union counts directly from the thresholded values.
    fn oracle(pred: &Tensor<f64>, gt: &Tensor<f64>, thr: f64) -> (f64, f64, f64, f64) {
        let (mut inter, mut pred_fg, mut gt_fg) = (0u64, 0u64, 0u64);
        for (p, g) in pred.iter().zip(gt.iter()) {
            let pb = *p > thr;
            let gb = *g == 1.0;
            if pb && gb {
                inter += 1;
            }
            if pb {
                pred_fg += 1;
            }
            if gb {
                gt_fg += 1;
            }
        }
        let union = pred_fg + gt_fg - inter;
        let (inter, union, pred_fg, gt_fg) =
            (inter as f64, union as f64, pred_fg as f64, gt_fg as f64);
        let dsc = (2.0 * inter + METRIC_EPS) / (pred_fg + gt_fg + METRIC_EPS);
        let iou = (inter + METRIC_EPS) / (union + METRIC_EPS);
        let recall = (inter + METRIC_EPS) / (gt_fg + METRIC_EPS);
        let precision = (inter + METRIC_EPS) / (pred_fg + METRIC_EPS);
        (dsc, iou, recall, precision)
    }

    proptest! {
        #[test]
        fn matches_the_pixel_set_oracle(
            pred_bits in prop::collection::vec(0.0f64..1.0, 256),
            gt_bits in prop::collection::vec(prop::bool::ANY, 256),
        ) {
            let pred = tensor(&[16, 16], pred_bits);
            let gt = tensor(&[16, 16], gt_bits.iter().map(|&b| f64::from(u8::from(b))).collect());
            let report = compute_metrics(&[pred.clone()], &[gt.clone()], 0.5).unwrap();
            let (dsc, iou, recall, precision) = oracle(&pred, &gt, 0.5);
            prop_assert!((report.mdsc - dsc).abs() < 1e-9);
            prop_assert!((report.miou - iou).abs() < 1e-9);
            prop_assert!((report.recall - recall).abs() < 1e-9);
            prop_assert!((report.precision - precision).abs() < 1e-9);
        }

        #[test]
        fn invariant_under_simultaneous_permutation(
            pred_bits in prop::collection::vec(0.0f64..1.0, 64),
            gt_bits in prop::collection::vec(prop::bool::ANY, 64),
            rotate_by in 0usize..64,
        ) {
            let gt_vals: Vec<f64> = gt_bits.iter().map(|&b| f64::from(u8::from(b))).collect();
            let report = compute_metrics(
                &[tensor(&[64], pred_bits.clone())],
                &[tensor(&[64], gt_vals.clone())],
                0.5,
            )
            .unwrap();
            let mut p2 = pred_bits;
            let mut g2 = gt_vals;
            p2.rotate_left(rotate_by);
            g2.rotate_left(rotate_by);
            let permuted = compute_metrics(&[tensor(&[64], p2)], &[tensor(&[64], g2)], 0.5).unwrap();
            prop_assert!((report.mdsc - permuted.mdsc).abs() < 1e-12);
            prop_assert!((report.miou - permuted.miou).abs() < 1e-12);
        }
    }
}
