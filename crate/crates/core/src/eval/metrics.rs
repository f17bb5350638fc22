//! Pixel confusion counts and the four overlap scores.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Count agreement between a predicted and a ground-truth mask.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::dim(
            "confusion",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Precision, recall, F1 and IoU of the positive class.
///
/// Degenerate counts: both masks empty scores 1.0 everywhere. An empty
/// ground truth with false positives gives precision 0, recall 1, F1 0 and
/// IoU 0; a missed nonempty ground truth gives precision 1, recall 0, F1 0
/// and IoU 0.
pub fn metrics(c: &ConfusionCounts) -> Scores {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return Scores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            iou: 1.0,
        };
    }
    let precision = if c.tp + c.fp == 0 {
        1.0
    } else {
        tp / (tp + fp)
    };
    let recall = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        tp / (tp + fn_)
    };
    let f1 = if c.tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        precision,
        recall,
        f1,
        iou: tp / (tp + fp + fn_),
    }
}
