//! Confusion-matrix IoU and head-disagreement statistics.

use crate::error::{Error, Result};

/// Ground-truth value excluded from every count.
pub const IGNORE_LABEL: u8 = 255;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Argument(format!(
                "{} ground-truth pixels vs {} predicted",
                truth.len(),
                pred.len()
            )));
        }
        let c = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= c || p >= c {
                return Err(Error::Argument(format!("class id out of range: truth {t}, pred {p}")));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Per-class `|pred ∩ truth| / |pred ∪ truth|`. A class absent from both
    /// truth and prediction scores 1.
    pub fn iou(&self) -> Vec<f64> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let truth: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let pred: u64 = (0..c).map(|t| self.get(t, k)).sum();
                let union = truth + pred - tp;
                if union == 0 {
                    1.0
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect()
    }

    /// Unweighted mean of [`iou`](Self::iou) over all classes.
    pub fn miou(&self) -> f64 {
        let iou = self.iou();
        iou.iter().sum::<f64>() / iou.len() as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

/// Per-pixel argmax over a `[C, HW]` block, ties to the lower index.
pub fn argmax_classes(probs: &[f32], num_classes: usize) -> Vec<u8> {
    let hw = probs.len() / num_classes;
    (0..hw)
        .map(|px| {
            let mut best = 0;
            for c in 1..num_classes {
                if probs[c * hw + px] > probs[best * hw + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Running count of pixels where two label maps differ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Disagreement {
    pub differing: u64,
    pub total: u64,
}

impl Disagreement {
    pub fn add(&mut self, a: &[u8], b: &[u8]) {
        debug_assert_eq!(a.len(), b.len());
        self.total += a.len() as u64;
        self.differing += a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.differing as f64 / self.total as f64
        }
    }
}
