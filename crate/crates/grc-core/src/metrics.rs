//! Confusion matrix and mean intersection-over-union.

use crate::error::{Error, Result};

/// Square confusion matrix over class indices; points whose true label is the
/// ignore id are excluded entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// counts[truth * classes + pred]
    counts: Vec<u64>,
    valid_points: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            valid_points: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn valid_points(&self) -> u64 {
        self.valid_points
    }

    pub fn accumulate(&mut self, truth: &[u32], pred: &[u32], ignore: u32) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Dimension {
                op: "confusion",
                msg: format!("{} truth labels vs {} predictions", truth.len(), pred.len()),
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore || t as usize >= self.classes {
                continue;
            }
            if p as usize >= self.classes {
                return Err(Error::Dimension {
                    op: "confusion",
                    msg: format!("prediction {p} out of range for {} classes", self.classes),
                });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
            self.valid_points += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.valid_points += other.valid_points;
    }

    /// Per-class IoU (None for classes absent from the ground truth) and the
    /// mean over classes present in the ground truth.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.valid_points == 0 {
            return Err(Error::EmptyInput("no valid points in confusion matrix".into()));
        }
        let c = self.classes;
        let mut per_class = vec![None; c];
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let truth_total: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            if truth_total == 0 {
                continue; // class absent from ground truth
            }
            let fp: u64 = (0..c).map(|i| self.counts[i * c + k]).sum::<u64>() - tp;
            let fn_: u64 = truth_total - tp;
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            per_class[k] = Some(iou);
            sum += iou;
            present += 1;
        }
        Ok((per_class, sum / present as f64))
    }

    pub fn accuracy(&self) -> f64 {
        if self.valid_points == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes)
            .map(|k| self.counts[k * self.classes + k])
            .sum();
        correct as f64 / self.valid_points as f64
    }
}

/// One-shot mIoU of a prediction against ground truth.
pub fn miou(
    pred: &[u32],
    truth: &[u32],
    classes: usize,
    ignore: u32,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(truth, pred, ignore)?;
    cm.miou()
}

/// Row-wise argmax of a [n x c] logit buffer.
pub fn argmax_rows(values: &[f64], c: usize) -> Vec<u32> {
    values
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_one() {
        let truth = [0u32, 1, 2, 1, 0];
        let (_, m) = miou(&truth, &truth, 3, 99).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn worked_two_class_case() {
        // truth [0,0,0,1,1], pred [0,0,1,1,0]:
        // class0: TP2 FP1 FN1 -> 1/2; class1: TP1 FP1 FN1 -> 1/3
        let truth = [0u32, 0, 0, 1, 1];
        let pred = [0u32, 0, 1, 1, 0];
        let (per_class, m) = miou(&pred, &truth, 2, 99).unwrap();
        assert_eq!(per_class[0], Some(0.5));
        assert!((per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((m - 5.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ignored_points_do_not_matter() {
        let truth = [0u32, 0, 9, 1, 9];
        let pred_a = [0u32, 0, 0, 1, 1];
        let pred_b = [0u32, 0, 1, 1, 0]; // differs only on ignored points
        let (_, ma) = miou(&pred_a, &truth, 2, 9).unwrap();
        let (_, mb) = miou(&pred_b, &truth, 2, 9).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma, 1.0);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let truth = [0u32, 0, 0, 0];
        let pred = [0u32, 0, 1, 0];
        let (per_class, m) = miou(&pred, &truth, 3, 99).unwrap();
        assert_eq!(per_class[1], None);
        assert_eq!(per_class[2], None);
        assert!((m - 0.75).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutation_invariance() {
        let truth = [0u32, 1, 2, 2, 1, 0, 2];
        let pred = [0u32, 2, 2, 1, 1, 0, 2];
        let (_, m1) = miou(&pred, &truth, 3, 99).unwrap();
        // permutation 0->2, 1->0, 2->1 applied to both
        let perm = |l: u32| (l + 2) % 3;
        let truth_p: Vec<u32> = truth.iter().map(|&l| perm(l)).collect();
        let pred_p: Vec<u32> = pred.iter().map(|&l| perm(l)).collect();
        let (_, m2) = miou(&pred_p, &truth_p, 3, 99).unwrap();
        assert!((m1 - m2).abs() < 1e-12);
    }

    #[test]
    fn no_valid_points_errors() {
        let truth = [9u32, 9];
        let pred = [0u32, 1];
        assert!(matches!(
            miou(&pred, &truth, 2, 9),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let t1 = [0u32, 1, 1];
        let p1 = [0u32, 1, 0];
        let t2 = [1u32, 0];
        let p2 = [1u32, 0];
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&t1, &p1, 9).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&t2, &p2, 9).unwrap();
        a.merge(&b);
        let mut joint = ConfusionMatrix::new(2);
        joint
            .accumulate(&[0, 1, 1, 1, 0], &[0, 1, 0, 1, 0], 9)
            .unwrap();
        assert_eq!(a, joint);
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let vals = [0.1, 0.9, 0.9, 0.3, -1.0, -2.0];
        assert_eq!(argmax_rows(&vals, 3), vec![1, 0]);
    }
}
