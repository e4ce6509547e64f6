use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth_space::{DepthMap, DepthRange};

use super::*;

fn range() -> DepthRange {
    DepthRange::new(0.1, 100.0).unwrap()
}

#[test]
fn perfect_prediction_is_all_zeros_and_ones() {
    let gt = DepthMap::dense(array![[1.0, 2.0], [3.0, 4.0]]);
    let m = depth_metrics(&gt, &gt, &range()).unwrap();
    assert_eq!(
        (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log),
        (0.0, 0.0, 0.0, 0.0)
    );
    assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
}

#[test]
fn single_pixel_worked_example_pins_strict_inequality() {
    // g = 4, p = 5: ratio exactly 1.25, which is NOT < 1.25
    let gt = DepthMap::dense(array![[4.0]]);
    let pred = DepthMap::dense(array![[5.0]]);
    let m = depth_metrics(&pred, &gt, &range()).unwrap();
    assert_abs_diff_eq!(m.abs_rel, 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(m.sq_rel, 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(m.rmse, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.rmse_log, 1.25f64.ln(), epsilon = 1e-6);
    assert_abs_diff_eq!(m.rmse_log, 0.223_14, epsilon = 1e-5);
    assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 1.0, 1.0));
}

#[test]
fn doubled_prediction_worked_example() {
    let gt = DepthMap::dense(array![[1.0, 3.0], [7.0, 2.0]]);
    let pred = DepthMap::dense(gt.values.mapv(|v| 2.0 * v));
    let m = depth_metrics(&pred, &gt, &range()).unwrap();
    assert_abs_diff_eq!(m.abs_rel, 1.0, epsilon = 1e-12);
    assert_eq!((m.delta1, m.delta2), (0.0, 0.0));
    assert_eq!(m.delta3, 0.0); // 1.25^3 = 1.953 < 2
    assert_abs_diff_eq!(m.rmse_log, 2.0f64.ln(), epsilon = 1e-12);
}

#[test]
fn matches_brute_force_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = range();
    for _ in 0..10 {
        let gt_vals = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.05..120.0));
        let valid = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..1.0) < 0.85);
        let pred_vals = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.05..120.0));
        let gt = DepthMap::new(gt_vals.clone(), valid.clone()).unwrap();
        let pred = DepthMap::dense(pred_vals.clone());
        let Ok(m) = depth_metrics(&pred, &gt, &r) else {
            continue;
        };

        // independent loop oracle
        let mut samples = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let g = gt_vals[(i, j)];
                if valid[(i, j)] && (r.d_min..=r.d_max).contains(&g) {
                    samples.push((pred_vals[(i, j)].clamp(r.d_min, r.d_max), g));
                }
            }
        }
        let n = samples.len() as f64;
        let abs_rel: f64 = samples.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
        let sq_rel: f64 = samples.iter().map(|(p, g)| (p - g).powi(2) / g).sum::<f64>() / n;
        let rmse = (samples.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
        let rmse_log =
            (samples.iter().map(|(p, g)| (p.ln() - g.ln()).powi(2)).sum::<f64>() / n).sqrt();
        let frac = |t: f64| {
            samples.iter().filter(|(p, g)| (p / g).max(g / p) < t).count() as f64 / n
        };
        assert_abs_diff_eq!(m.abs_rel, abs_rel, epsilon = 1e-10);
        assert_abs_diff_eq!(m.sq_rel, sq_rel, epsilon = 1e-10);
        assert_abs_diff_eq!(m.rmse, rmse, epsilon = 1e-10);
        assert_abs_diff_eq!(m.rmse_log, rmse_log, epsilon = 1e-10);
        assert_abs_diff_eq!(m.delta1, frac(1.25), epsilon = 1e-10);
        assert_abs_diff_eq!(m.delta2, frac(1.25f64.powi(2)), epsilon = 1e-10);
        assert_abs_diff_eq!(m.delta3, frac(1.25f64.powi(3)), epsilon = 1e-10);
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
    }
}

#[test]
fn scale_homogeneity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt_vals = Array2::from_shape_fn((6, 6), |_| rng.random_range(0.5..20.0));
    let pred_vals = Array2::from_shape_fn((6, 6), |_| rng.random_range(0.5..20.0));
    // wide range so clamping and range exclusion stay inactive under scaling
    let r = DepthRange::new(1e-4, 1e4).unwrap();
    let m = depth_metrics(&DepthMap::dense(pred_vals.clone()), &DepthMap::dense(gt_vals.clone()), &r)
        .unwrap();
    let s = 3.7;
    let ms = depth_metrics(
        &DepthMap::dense(pred_vals.mapv(|v| s * v)),
        &DepthMap::dense(gt_vals.mapv(|v| s * v)),
        &r,
    )
    .unwrap();
    assert_abs_diff_eq!(m.abs_rel, ms.abs_rel, epsilon = 1e-10);
    assert_abs_diff_eq!(m.rmse_log, ms.rmse_log, epsilon = 1e-10);
    assert_abs_diff_eq!(ms.rmse, s * m.rmse, epsilon = 1e-9);
    assert_eq!(
        (m.delta1, m.delta2, m.delta3),
        (ms.delta1, ms.delta2, ms.delta3)
    );
    // sq_rel scales by s as well: (s dp)^2 / (s g) = s dp^2/g
    assert_abs_diff_eq!(ms.sq_rel, s * m.sq_rel, epsilon = 1e-9);
}

#[test]
fn empty_mask_is_an_error() {
    let gt = DepthMap::new(array![[5.0]], array![[false]]).unwrap();
    let pred = DepthMap::dense(array![[5.0]]);
    assert!(depth_metrics(&pred, &gt, &range()).is_err());
    // valid but outside the evaluation range
    let gt = DepthMap::dense(array![[500.0]]);
    assert!(depth_metrics(&pred, &gt, &range()).is_err());
}

#[test]
fn confusion_hand_count_and_additivity() {
    let mut acc = SegAccumulator::new(2, 255);
    let gt: Array2<u32> = array![[0, 0], [1, 1]];
    let pred: Array2<u32> = array![[0, 1], [1, 1]];
    acc.update(&pred.view(), &gt.view()).unwrap();
    assert_eq!(acc.confusion(), &array![[1u64, 1], [0, 2]]);

    // all-ignored update leaves the matrix unchanged
    let ignored: Array2<u32> = array![[255, 255], [255, 255]];
    acc.update(&pred.view(), &ignored.view()).unwrap();
    assert_eq!(acc.confusion(), &array![[1u64, 1], [0, 2]]);

    // two half updates equal one full update
    let mut halves = SegAccumulator::new(2, 255);
    halves
        .update(&pred.slice(ndarray::s![0..1, ..]), &gt.slice(ndarray::s![0..1, ..]))
        .unwrap();
    halves
        .update(&pred.slice(ndarray::s![1..2, ..]), &gt.slice(ndarray::s![1..2, ..]))
        .unwrap();
    assert_eq!(halves.confusion(), &array![[1u64, 1], [0, 2]]);

    // merge is matrix addition
    let mut merged = SegAccumulator::new(2, 255);
    merged.merge(&acc).unwrap();
    merged.merge(&halves).unwrap();
    assert_eq!(merged.confusion(), &array![[2u64, 2], [0, 4]]);

    let bad: Array2<u32> = array![[7, 0], [0, 0]];
    assert!(acc.update(&pred.view(), &bad.view()).is_err());
    assert!(acc.update(&bad.view(), &gt.view()).is_err());
}

#[test]
fn miou_hand_computation_and_exclusion() {
    let mut acc = SegAccumulator::new(2, 255);
    let gt: Array2<u32> = array![[0, 0], [1, 1]];
    let pred: Array2<u32> = array![[0, 1], [1, 1]];
    acc.update(&pred.view(), &gt.view()).unwrap();
    let m = acc.miou().unwrap();
    assert_abs_diff_eq!(m.miou, 7.0 / 12.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.pixel_acc, 0.75, epsilon = 1e-12);
    assert_eq!(m.per_class_iou[0], Some(0.5));
    assert_abs_diff_eq!(m.per_class_iou[1].unwrap(), 2.0 / 3.0, epsilon = 1e-12);

    // class 2 absent everywhere: excluded, miou unchanged
    let mut acc3 = SegAccumulator::new(3, 255);
    acc3.update(&pred.view(), &gt.view()).unwrap();
    let m3 = acc3.miou().unwrap();
    assert_abs_diff_eq!(m3.miou, m.miou, epsilon = 1e-12);
    assert_eq!(m3.per_class_iou[2], None);

    // perfect predictions
    let mut acc = SegAccumulator::new(3, 255);
    acc.update(&gt.view(), &gt.view()).unwrap();
    let m = acc.miou().unwrap();
    assert_eq!((m.miou, m.pixel_acc), (1.0, 1.0));

    assert!(SegAccumulator::new(3, 255).miou().is_err());
}

#[test]
fn miou_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 4u32;
    let gt = Array2::from_shape_fn((8, 8), |_| {
        if rng.random_range(0.0..1.0) < 0.1 {
            255u32
        } else {
            rng.random_range(0..k)
        }
    });
    let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..k));
    let mut acc = SegAccumulator::new(k as usize, 255);
    acc.update(&pred.view(), &gt.view()).unwrap();
    let base = acc.miou().unwrap();

    let perm = [2u32, 0, 3, 1];
    let apply = |a: &Array2<u32>| a.mapv(|v| if v == 255 { 255 } else { perm[v as usize] });
    let mut acc_p = SegAccumulator::new(k as usize, 255);
    acc_p.update(&apply(&pred).view(), &apply(&gt).view()).unwrap();
    let permuted = acc_p.miou().unwrap();
    assert_abs_diff_eq!(base.miou, permuted.miou, epsilon = 1e-12);
    assert_abs_diff_eq!(base.pixel_acc, permuted.pixel_acc, epsilon = 1e-12);
    for c in 0..k as usize {
        assert_eq!(base.per_class_iou[c], permuted.per_class_iou[perm[c] as usize]);
    }
}
