//! Transforms between metric depth, logarithmic normalized depth, and stereo
//! disparity, plus depth validity masking.
//!
//! Metric depth uses a sentinel value of 0 for invalid pixels so a 16-bit
//! millimeter PNG can represent "no data" losslessly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Valid metric depth interval `[d_min, d_max]`, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min.is_finite() && d_max.is_finite()) || d_min <= 0.0 || d_max <= d_min {
            return Err(Error::Config(format!(
                "depth range requires 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}"
            )));
        }
        Ok(Self { d_min, d_max })
    }

    /// `ln(d_max / d_min)`, the log-space span.
    pub fn log_span(&self) -> f64 {
        (self.d_max / self.d_min).ln()
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.d_min, self.d_max)
    }
}

/// Metric depth map in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::Shape(format!(
                "depth values {:?} vs mask {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        Ok(Self { values, valid })
    }

    /// All pixels valid.
    pub fn dense(values: Array2<f64>) -> Self {
        let valid = Array2::from_elem(values.dim(), true);
        Self { values, valid }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Normalized logarithmic depth in `[0, 1]` with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDepthMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
}

/// Eq.-style logarithmic parameterization of a metric depth map:
/// `l = ln(d / d_min) / ln(d_max / d_min)` per valid pixel.
///
/// Valid-pixel depths are clamped into the range before the transform; the
/// number of clamped pixels is returned alongside so callers can log it.
/// Invalid pixels map to the 0 sentinel.
pub fn to_log_depth(d: &DepthMap, range: &DepthRange) -> Result<(LogDepthMap, usize)> {
    if d.values.dim() != d.valid.dim() {
        return Err(Error::Shape("depth map values/mask shape mismatch".into()));
    }
    let span = range.log_span();
    let mut clamped = 0usize;
    let mut out = Array2::<f64>::zeros(d.values.dim());
    for ((idx, &v), o) in d.values.indexed_iter().zip(out.iter_mut()) {
        if d.valid[idx] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite depth {v} at valid pixel {idx:?}"
                )));
            }
            let c = range.clamp(v);
            if c != v {
                clamped += 1;
            }
            *o = (c / range.d_min).ln() / span;
        }
    }
    Ok((
        LogDepthMap {
            values: out,
            valid: d.valid.clone(),
        },
        clamped,
    ))
}

/// Scalar form of [`to_log_depth`], with clamping.
pub fn log_depth_scalar(d: f64, range: &DepthRange) -> f64 {
    (range.clamp(d) / range.d_min).ln() / range.log_span()
}

/// Scalar inverse: `d = d_min * (d_max / d_min)^l`.
pub fn metric_depth_scalar(l: f64, range: &DepthRange) -> f64 {
    range.d_min * (range.d_max / range.d_min).powf(l)
}

const LOG_EPS: f64 = 1e-6;

/// Inverse of [`to_log_depth`]: `d = d_min * (d_max/d_min)^l` per valid pixel.
/// Values within `1e-6` outside `[0, 1]` are clamped; anything further out is
/// rejected.
pub fn from_log_depth(l: &LogDepthMap, range: &DepthRange) -> Result<DepthMap> {
    let mut out = Array2::<f64>::zeros(l.values.dim());
    for ((idx, &v), o) in l.values.indexed_iter().zip(out.iter_mut()) {
        if l.valid[idx] {
            if !v.is_finite() || v < -LOG_EPS || v > 1.0 + LOG_EPS {
                return Err(Error::InvalidInput(format!(
                    "log depth {v} outside [0, 1] at pixel {idx:?}"
                )));
            }
            *o = metric_depth_scalar(v.clamp(0.0, 1.0), range);
        }
    }
    DepthMap::new(out, l.valid.clone())
}

/// Pinhole stereo conversion: `depth = focal_px * baseline / disparity`.
/// Pixels with non-positive or non-finite disparity become invalid (sentinel 0).
pub fn disparity_to_depth(disparity: &Array2<f64>, focal_px: f64, baseline: f64) -> Result<DepthMap> {
    if !(focal_px > 0.0) || !(baseline > 0.0) {
        return Err(Error::InvalidInput(format!(
            "focal_px and baseline must be positive, got {focal_px}, {baseline}"
        )));
    }
    let mut values = Array2::<f64>::zeros(disparity.dim());
    let mut valid = Array2::from_elem(disparity.dim(), false);
    for (idx, &disp) in disparity.indexed_iter() {
        if disp.is_finite() && disp > 0.0 {
            values[idx] = focal_px * baseline / disp;
            valid[idx] = true;
        }
    }
    DepthMap::new(values, valid)
}

/// Effective validity: stored mask AND finite AND strictly positive.
pub fn validity_mask(d: &DepthMap) -> Array2<bool> {
    let mut out = Array2::from_elem(d.values.dim(), false);
    for (idx, &v) in d.values.indexed_iter() {
        out[idx] = d.valid[idx] && v.is_finite() && v > 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn range() -> DepthRange {
        DepthRange::new(0.1, 80.0).unwrap()
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(DepthRange::new(0.0, 1.0).is_err());
        assert!(DepthRange::new(-1.0, 1.0).is_err());
        assert!(DepthRange::new(2.0, 1.0).is_err());
        assert!(DepthRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn log_depth_anchors() {
        let r = range();
        let d = DepthMap::dense(array![[r.d_min, r.d_max, (r.d_min * r.d_max).sqrt()]]);
        let (l, clamped) = to_log_depth(&d, &r).unwrap();
        assert_eq!(clamped, 0);
        assert_abs_diff_eq!(l.values[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values[(0, 2)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn log_depth_worked_value() {
        // d_min=0.1, d_max=80, d=10 -> ln(100)/ln(800)
        let r = range();
        let expect = (10.0f64 / 0.1).ln() / (80.0f64 / 0.1).ln();
        assert_abs_diff_eq!(expect, 0.688_921_1, epsilon = 1e-6);
        assert_abs_diff_eq!(log_depth_scalar(10.0, &r), expect, epsilon = 1e-15);
    }

    #[test]
    fn invalid_pixels_stay_sentinel_zero() {
        let r = range();
        let d = DepthMap::new(
            array![[5.0, 123.0]],
            array![[false, true]],
        )
        .unwrap();
        let (l, clamped) = to_log_depth(&d, &r).unwrap();
        assert_eq!(l.values[(0, 0)], 0.0);
        assert!(!l.valid[(0, 0)]);
        // 123 m clamps onto d_max
        assert_eq!(clamped, 1);
        assert_abs_diff_eq!(l.values[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_finite_on_valid_pixel() {
        let r = range();
        let d = DepthMap::dense(array![[f64::NAN]]);
        assert!(to_log_depth(&d, &r).is_err());
        // but not on an invalid pixel
        let d = DepthMap::new(array![[f64::NAN]], array![[false]]).unwrap();
        assert!(to_log_depth(&d, &r).is_ok());
    }

    #[test]
    fn from_log_anchors_and_bounds() {
        let r = range();
        let l = LogDepthMap {
            values: array![[0.0, 1.0]],
            valid: array![[true, true]],
        };
        let d = from_log_depth(&l, &r).unwrap();
        assert_abs_diff_eq!(d.values[(0, 0)], r.d_min, epsilon = 1e-12);
        assert_abs_diff_eq!(d.values[(0, 1)], r.d_max, epsilon = 1e-10);

        let bad = LogDepthMap {
            values: array![[1.1]],
            valid: array![[true]],
        };
        assert!(from_log_depth(&bad, &r).is_err());
        // inside tolerance: clamps
        let edge = LogDepthMap {
            values: array![[1.0 + 5e-7]],
            valid: array![[true]],
        };
        assert!(from_log_depth(&edge, &r).is_ok());
    }

    #[test]
    fn round_trip_1000_random_depths() {
        use rand::{Rng, SeedableRng};
        let r = range();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let d = rng.random_range(r.d_min..r.d_max);
            let back = metric_depth_scalar(log_depth_scalar(d, &r), &r);
            assert!(((back - d) / d).abs() < 1e-6, "{d} -> {back}");
        }
    }

    #[test]
    fn log_depth_strictly_monotone() {
        let r = range();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..500 {
            let d = r.d_min + (r.d_max - r.d_min) * (i as f64) / 499.0;
            let l = log_depth_scalar(d, &r);
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn disparity_identity_and_degenerate() {
        // focal*baseline = 100 m*px, disparity 2 px -> 50 m
        let disp = array![[2.0, 0.0]];
        let d = disparity_to_depth(&disp, 200.0, 0.5).unwrap();
        assert_abs_diff_eq!(d.values[(0, 0)], 50.0, epsilon = 1e-12);
        assert!(d.valid[(0, 0)]);
        assert_eq!(d.values[(0, 1)], 0.0);
        assert!(!d.valid[(0, 1)]);
    }

    #[test]
    fn disparity_worked_value_and_monotone() {
        let disp = array![[10.0]];
        let d = disparity_to_depth(&disp, 2262.52, 0.209313).unwrap();
        assert_abs_diff_eq!(d.values[(0, 0)], 2262.52 * 0.209313 / 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.values[(0, 0)], 47.358, epsilon = 1e-3);

        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let disp = array![[i as f64]];
            let d = disparity_to_depth(&disp, 100.0, 1.0).unwrap();
            assert!(d.values[(0, 0)] < prev);
            prev = d.values[(0, 0)];
        }
    }

    #[test]
    fn validity_mask_rules() {
        let d = DepthMap::new(
            array![[1.0, 0.0, f64::NAN, 2.0]],
            array![[true, true, true, false]],
        )
        .unwrap();
        let m = validity_mask(&d);
        assert_eq!(
            m.iter().copied().collect::<Vec<_>>(),
            vec![true, false, false, false]
        );
    }

    #[test]
    fn masks_only_shrink() {
        let r = range();
        let d = DepthMap::new(array![[5.0, 1.0]], array![[true, false]]).unwrap();
        let (l, _) = to_log_depth(&d, &r).unwrap();
        let back = from_log_depth(&l, &r).unwrap();
        for idx in [(0usize, 0usize), (0, 1)] {
            assert!(!back.valid[idx] || d.valid[idx]);
        }
    }
}
