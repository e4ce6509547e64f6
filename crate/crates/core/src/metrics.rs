//! Evaluation statistics: the standard depth error suite and segmentation
//! mIoU via an explicit confusion matrix.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::depth_space::{DepthMap, DepthRange};
use crate::{Error, Result};

/// The depth error suite. Deltas use the strict-< convention:
/// `delta_k = fraction of pixels with max(p/g, g/p) < 1.25^k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Depth metrics over the mask `gt valid ∧ gt ∈ [d_min, d_max]`, with
/// predictions clamped to the range first. Both maps are metric meters.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, range: &DepthRange) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "depth metrics: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq_err, mut sq_log_err) = (0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    let (t1, t2, t3) = (1.25, 1.25f64.powi(2), 1.25f64.powi(3));
    for ((&g, &valid), &p_raw) in gt
        .values
        .iter()
        .zip(gt.valid.iter())
        .zip(pred.values.iter())
    {
        if !valid || g < range.d_min || g > range.d_max {
            continue;
        }
        let p = range.clamp(p_raw);
        n += 1;
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq_err += diff * diff;
        let log_diff = p.ln() - g.ln();
        sq_log_err += log_diff * log_diff;
        let ratio = (p / g).max(g / p);
        if ratio < t1 {
            d1 += 1;
        }
        if ratio < t2 {
            d2 += 1;
        }
        if ratio < t3 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "depth metrics: no pixel is valid and inside the evaluation range".into(),
        ));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq_err / nf).sqrt(),
        rmse_log: (sq_log_err / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
    })
}

/// Confusion-matrix accumulator: rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegAccumulator {
    confusion: Array2<u64>,
    ignore_id: u32,
}

/// The outputs of [`SegAccumulator::miou`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    /// Per-class IoU; `None` for classes absent from both gt and predictions.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_acc: f64,
}

impl SegAccumulator {
    pub fn new(num_classes: usize, ignore_id: u32) -> Self {
        Self {
            confusion: Array2::zeros((num_classes, num_classes)),
            ignore_id,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.nrows()
    }

    pub fn confusion(&self) -> &Array2<u64> {
        &self.confusion
    }

    pub fn scored_pixels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Scores one prediction/label pair; ignored gt pixels contribute nothing.
    pub fn update(&mut self, pred: &ArrayView2<'_, u32>, gt: &ArrayView2<'_, u32>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape(format!(
                "confusion update: pred {:?} vs gt {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let k = self.num_classes() as u32;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == self.ignore_id {
                continue;
            }
            if g >= k {
                return Err(Error::InvalidInput(format!(
                    "ground-truth label {g} outside 0..{k} and not the ignore id {}",
                    self.ignore_id
                )));
            }
            if p >= k {
                return Err(Error::InvalidInput(format!(
                    "predicted label {p} outside 0..{k}"
                )));
            }
            self.confusion[(g as usize, p as usize)] += 1;
        }
        Ok(())
    }

    /// Adds another accumulator's counts; shards merged in any order agree.
    pub fn merge(&mut self, other: &SegAccumulator) -> Result<()> {
        if self.num_classes() != other.num_classes() || self.ignore_id != other.ignore_id {
            return Err(Error::InvalidInput(
                "merging confusion matrices with different class setups".into(),
            ));
        }
        self.confusion += &other.confusion;
        Ok(())
    }

    /// Mean IoU over classes present in gt or predictions, per-class IoUs, and
    /// pixel accuracy.
    pub fn miou(&self) -> Result<SegMetrics> {
        let total = self.scored_pixels();
        if total == 0 {
            return Err(Error::InvalidInput("mIoU over zero scored pixels".into()));
        }
        let k = self.num_classes();
        let row: Array1<u64> = self.confusion.sum_axis(ndarray::Axis(1));
        let col: Array1<u64> = self.confusion.sum_axis(ndarray::Axis(0));
        let mut per_class = Vec::with_capacity(k);
        let (mut sum, mut counted) = (0.0, 0usize);
        let mut trace = 0u64;
        for c in 0..k {
            let tp = self.confusion[(c, c)];
            trace += tp;
            let denom = row[c] + col[c] - tp;
            if denom == 0 {
                per_class.push(None);
                continue;
            }
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::InvalidInput(
                "mIoU: no class appears in ground truth or predictions".into(),
            ));
        }
        Ok(SegMetrics {
            miou: sum / counted as f64,
            per_class_iou: per_class,
            pixel_acc: trace as f64 / total as f64,
        })
    }
}

#[cfg(test)]
mod tests;
