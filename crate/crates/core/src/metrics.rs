//! Foreground IoU accumulated per class over an evaluation run.

use std::collections::BTreeMap;

use serde::Serialize;
use symnet_tensor::{Real, Tensor};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `TP / (TP + FP + FN)`; `None` when the denominator is zero.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiouAccumulator {
    per_class: BTreeMap<usize, Confusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub iou: f64,
    /// Set when the class had no foreground in either prediction or truth.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    pub miou: f64,
}

impl MiouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one binary prediction against its binary ground truth.
    pub fn add<T: Real>(&mut self, class_id: usize, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return invalid(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()));
        }
        let c = self.per_class.entry(class_id).or_default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p > T::zero(), t > T::zero()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn confusion(&self, class_id: usize) -> Option<Confusion> {
        self.per_class.get(&class_id).copied()
    }

    pub fn report(&self) -> Result<MiouReport> {
        if self.per_class.is_empty() {
            return invalid("no episodes were evaluated");
        }
        let per_class: Vec<ClassIou> = self
            .per_class
            .iter()
            .map(|(&class_id, c)| ClassIou {
                class_id,
                iou: c.iou().unwrap_or(0.0),
                degenerate: c.iou().is_none(),
            })
            .collect();
        let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
        Ok(MiouReport { per_class, miou })
    }
}
