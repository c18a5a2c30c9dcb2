//! Segmentation metrics: pooled F1, two-class mean IoU, and the best-single-
//! threshold / best-per-image-threshold F1 pair over a fixed threshold grid.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// 0.01 .. 0.99 step 0.01.
pub fn threshold_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 * 0.01).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn accumulate<T: Scalar>(&mut self, pred: &Tensor<T>, mask: &Tensor<T>, threshold: f64) {
        assert_eq!(
            pred.shape(),
            mask.shape(),
            "shape error: prediction {:?} vs mask {:?}",
            pred.shape(),
            mask.shape()
        );
        for (p, m) in pred.data().iter().zip(mask.data()) {
            let hit = p.to_f64() >= threshold;
            let pos = m.to_f64() >= 0.5;
            match (hit, pos) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fneg += 1,
                (false, false) => self.tn += 1,
            }
        }
    }

    /// Empty prediction against empty truth counts as perfect.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.fneg == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fneg == 0 {
            if self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fneg) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        if self.tp == 0 && self.fp == 0 && self.fneg == 0 {
            return 1.0;
        }
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Mean of foreground and background IoU; an empty class with an empty
    /// prediction scores 1.
    pub fn miou(&self) -> f64 {
        let fg_union = self.tp + self.fp + self.fneg;
        let fg = if fg_union == 0 { 1.0 } else { self.tp as f64 / fg_union as f64 };
        let bg_union = self.tn + self.fp + self.fneg;
        let bg = if bg_union == 0 { 1.0 } else { self.tn as f64 / bg_union as f64 };
        (fg + bg) / 2.0
    }
}

/// Pooled F1 over all pixels of all images at one threshold.
pub fn f1_at<T: Scalar>(preds: &[Tensor<T>], masks: &[Tensor<T>], threshold: f64) -> f64 {
    let mut c = Confusion::default();
    for (p, m) in preds.iter().zip(masks) {
        c.accumulate(p, m, threshold);
    }
    c.f1()
}

/// Pooled two-class mean IoU at one threshold.
pub fn miou<T: Scalar>(preds: &[Tensor<T>], masks: &[Tensor<T>], threshold: f64) -> f64 {
    let mut c = Confusion::default();
    for (p, m) in preds.iter().zip(masks) {
        c.accumulate(p, m, threshold);
    }
    c.miou()
}

/// Threshold sweeps. The dataset-scale score commits to one shared threshold
/// and reports the mean per-image F1 there; the image-scale score lets every
/// image pick its own best threshold. Moving the max inside the mean can only
/// help, so the image-scale score dominates the dataset-scale one on every
/// input.
pub fn ods_ois<T: Scalar>(preds: &[Tensor<T>], masks: &[Tensor<T>]) -> (f64, f64) {
    assert!(!preds.is_empty(), "shape error: ods_ois needs at least one image");
    let grid = threshold_grid();
    let n = preds.len() as f64;
    let mut ods = 0.0f64;
    let mut per_image_best = vec![0.0f64; preds.len()];
    for &t in &grid {
        let mut mean_f1 = 0.0f64;
        for (i, (p, m)) in preds.iter().zip(masks).enumerate() {
            let mut c = Confusion::default();
            c.accumulate(p, m, t);
            let f1 = c.f1();
            per_image_best[i] = per_image_best[i].max(f1);
            mean_f1 += f1 / n;
        }
        ods = ods.max(mean_f1);
    }
    let ois = per_image_best.iter().sum::<f64>() / per_image_best.len() as f64;
    (ods, ois)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub f1: f64,
    pub miou: f64,
    pub best_f1: f64,
    pub best_threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub ods: f64,
    pub ois: f64,
    pub f1: f64,
    pub per_image: Vec<PerImageMetrics>,
}

/// Full report at the default threshold plus the dataset/image threshold
/// sweeps.
pub fn evaluate_predictions<T: Scalar>(
    ids: &[String],
    preds: &[Tensor<T>],
    masks: &[Tensor<T>],
) -> MetricsReport {
    assert_eq!(ids.len(), preds.len());
    assert_eq!(preds.len(), masks.len());
    let (ods, ois) = ods_ois(preds, masks);
    let grid = threshold_grid();
    let per_image: Vec<PerImageMetrics> = ids
        .iter()
        .zip(preds.iter().zip(masks))
        .map(|(id, (p, m))| {
            let mut c = Confusion::default();
            c.accumulate(p, m, DEFAULT_THRESHOLD);
            let mut best_f1 = 0.0f64;
            let mut best_threshold = grid[0];
            for &t in &grid {
                let mut ct = Confusion::default();
                ct.accumulate(p, m, t);
                let f = ct.f1();
                if f > best_f1 {
                    best_f1 = f;
                    best_threshold = t;
                }
            }
            PerImageMetrics { id: id.clone(), f1: c.f1(), miou: c.miou(), best_f1, best_threshold }
        })
        .collect();
    MetricsReport {
        miou: miou(preds, masks, DEFAULT_THRESHOLD),
        ods,
        ois,
        f1: f1_at(preds, masks, DEFAULT_THRESHOLD),
        per_image,
    }
}
