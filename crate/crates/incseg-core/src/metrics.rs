//! Confusion-matrix accumulation and IoU summaries.
//!
//! IoU scores are reported in percent. Classes that never appear in either
//! ground truth or prediction are excluded from means rather than counted
//! as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel mask value for pixels without a label; skipped by accumulation.
pub const UNLABELED: u8 = u8::MAX;

/// Square integer confusion matrix; rows are ground truth, columns are
/// predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one image's pixels. Unlabeled ground-truth pixels are skipped;
    /// any other label outside `[0, classes)` is an error.
    pub fn accumulate(&mut self, ground_truth: &[u8], predictions: &[u8]) -> Result<()> {
        if ground_truth.len() != predictions.len() {
            return Err(Error::DimMismatch(format!(
                "gt has {} pixels, prediction {}",
                ground_truth.len(),
                predictions.len()
            )));
        }
        for (&gt, &pred) in ground_truth.iter().zip(predictions) {
            if gt == UNLABELED {
                continue;
            }
            let (gt, pred) = (gt as usize, pred as usize);
            if gt >= self.classes {
                return Err(Error::LabelOutOfRange { label: gt, classes: self.classes });
            }
            if pred >= self.classes {
                return Err(Error::LabelOutOfRange { label: pred, classes: self.classes });
            }
            self.counts[gt * self.classes + pred] += 1;
        }
        Ok(())
    }

    /// Merge another shard; accumulation is associative and commutative
    /// over the integer counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class and grouped IoU scores, in percent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IouReport {
    /// Indexed by class id; `None` for classes absent from both gt and
    /// prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou_base: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou: Option<f64>,
    pub hiou: Option<f64>,
}

fn mean_over(ids: &[usize], per_class: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = ids.iter().filter_map(|&c| per_class[c]).collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Per-class IoU plus means over the base group (the first stage's
/// categories), the new group (everything added later), and all classes.
pub fn iou_scores(conf: &ConfusionMatrix, base_ids: &[usize], new_ids: &[usize]) -> IouReport {
    let n = conf.classes();
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = conf.count(c, c);
        let mut fp = 0u64;
        let mut fng = 0u64;
        for k in 0..n {
            if k != c {
                fp += conf.count(k, c);
                fng += conf.count(c, k);
            }
        }
        let denom = tp + fp + fng;
        per_class.push(if denom == 0 {
            None
        } else {
            Some(100.0 * tp as f64 / denom as f64)
        });
    }
    let miou_base = mean_over(base_ids, &per_class);
    let miou_new = mean_over(new_ids, &per_class);
    let all_ids: Vec<usize> = (0..n).collect();
    let miou = mean_over(&all_ids, &per_class);
    let hiou = match (miou_base, miou_new) {
        (Some(b), Some(nw)) => Some(hiou(b, nw)),
        _ => None,
    };
    IouReport { per_class, miou_base, miou_new, miou, hiou }
}

/// Harmonic mean of the base and new mean IoUs: `2ab / (a + b)`, or 0 when
/// both are 0.
pub fn hiou(miou_base: f64, miou_new: f64) -> f64 {
    assert!(miou_base >= 0.0 && miou_new >= 0.0);
    let sum = miou_base + miou_new;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * miou_base * miou_new / sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut conf = ConfusionMatrix::new(3);
        conf.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        for c in 0..3 {
            for k in 0..3 {
                assert_eq!(conf.count(c, k), u64::from(c == k) * if c == 1 { 2 } else { 1 });
            }
        }
        let report = iou_scores(&conf, &[0, 1], &[2]);
        assert_eq!(report.per_class, vec![Some(100.0); 3]);
    }

    #[test]
    fn unlabeled_pixels_are_skipped() {
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&[UNLABELED, UNLABELED], &[0, 1]).unwrap();
        assert_eq!(conf.total(), 0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(conf.count(0, 0), 1);
        assert_eq!(conf.count(0, 1), 1);
        assert_eq!(conf.count(1, 1), 2);
        let report = iou_scores(&conf, &[0], &[1]);
        assert!((report.per_class[0].unwrap() - 50.0).abs() < 1e-12);
        assert!((report.per_class[1].unwrap() - 100.0 * 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_excluded_from_means() {
        let mut conf = ConfusionMatrix::new(3);
        conf.accumulate(&[0, 0], &[0, 0]).unwrap();
        let report = iou_scores(&conf, &[0, 1], &[2]);
        assert_eq!(report.per_class[1], None);
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.miou_base, Some(100.0));
        assert_eq!(report.miou_new, None);
        assert_eq!(report.hiou, None);
    }

    #[test]
    fn out_of_range_label_is_error() {
        let mut conf = ConfusionMatrix::new(2);
        assert!(conf.accumulate(&[2], &[0]).is_err());
        assert!(conf.accumulate(&[0], &[2]).is_err());
    }

    #[test]
    fn merge_matches_joint_accumulation() {
        let gt = [0u8, 1, 1, 0, 1];
        let pred = [0u8, 1, 0, 0, 1];
        let mut joint = ConfusionMatrix::new(2);
        joint.accumulate(&gt, &pred).unwrap();
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&gt[..2], &pred[..2]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&gt[2..], &pred[2..]).unwrap();
        a.merge(&b);
        assert_eq!(a, joint);
    }

    #[test]
    fn hiou_paper_anchor_values() {
        assert!((hiou(75.89, 34.90) - 47.81).abs() <= 0.05);
        assert!((hiou(42.18, 23.07) - 29.83).abs() <= 0.05);
    }

    #[test]
    fn hiou_equal_arguments_identity() {
        for x in [0.0, 1.0, 37.5, 100.0] {
            assert!((hiou(x, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn hiou_bounded_by_min_and_mean() {
        for a in 0..=20 {
            for b in 0..=20 {
                let (a, b) = (a as f64 * 5.0, b as f64 * 5.0);
                let h = hiou(a, b);
                assert!(h >= 0.0);
                if a + b > 0.0 {
                    assert!(h <= (a + b) / 2.0 + 1e-12);
                    assert!(h >= a.min(b) - 1e-12);
                }
            }
        }
    }

    #[test]
    fn miou_invariant_under_label_permutation() {
        // swap labels 0 and 2 in both gt and prediction
        let gt = [0u8, 0, 1, 2, 2, 1];
        let pred = [0u8, 2, 1, 2, 0, 1];
        let swap = |v: u8| match v {
            0 => 2,
            2 => 0,
            other => other,
        };
        let mut conf = ConfusionMatrix::new(3);
        conf.accumulate(&gt, &pred).unwrap();
        let mut conf_p = ConfusionMatrix::new(3);
        let gt_p: Vec<u8> = gt.iter().map(|&v| swap(v)).collect();
        let pred_p: Vec<u8> = pred.iter().map(|&v| swap(v)).collect();
        conf_p.accumulate(&gt_p, &pred_p).unwrap();
        let all = [0, 1, 2];
        let a = iou_scores(&conf, &all, &[]);
        let b = iou_scores(&conf_p, &all, &[]);
        assert!((a.miou.unwrap() - b.miou.unwrap()).abs() < 1e-12);
    }
}
