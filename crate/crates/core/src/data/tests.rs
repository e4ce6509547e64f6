use approx::assert_abs_diff_eq;
use ndarray::IxDyn;

use crate::depth_space::DepthRange;

use super::*;

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        height: 16,
        width: 16,
        num_classes: 4,
        ..SyntheticSpec::default()
    }
}

#[test]
fn generator_is_deterministic_and_in_range() {
    let spec = tiny_spec();
    let a = render_scene(7, 3, "train", &spec);
    let b = render_scene(7, 3, "train", &spec);
    assert_eq!(a.image, b.image);
    assert_eq!(a.depth.values, b.depth.values);
    assert_eq!(a.labels, b.labels);
    // a different split or index changes the scene
    let c = render_scene(7, 3, "val", &spec);
    assert_ne!(a.labels, c.labels);

    for &d in a.depth.values.iter() {
        assert!((spec.d_min..=spec.d_max).contains(&d), "depth {d} outside range");
    }
    for &l in a.labels.iter() {
        assert!((l as usize) < spec.num_classes, "label {l} outside 0..{}", spec.num_classes);
    }
    for &v in a.image.iter() {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn occlusion_consistency_on_small_scenes() {
    // wherever a non-background class is painted, its depth must be strictly
    // nearer than the background and agree with some shape of that class
    let spec = tiny_spec();
    for idx in 0..10 {
        let s = render_scene(42, idx, "train", &spec);
        for i in 0..spec.height {
            for j in 0..spec.width {
                if s.labels[(i, j)] != 0 {
                    assert!(s.depth.values[(i, j)] < spec.d_max);
                } else {
                    assert_eq!(s.depth.values[(i, j)], spec.d_max);
                }
            }
        }
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    gen_synthetic(dir.path(), "train", 11, 3, &spec).unwrap();
    let manifest = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(manifest.num_classes, spec.num_classes);

    let loaded = load_dataset(dir.path(), "train", &manifest).unwrap();
    assert_eq!(loaded.len(), 3);
    // lexicographic order
    assert!(loaded.windows(2).all(|w| w[0].id < w[1].id));

    for (idx, sample) in loaded.iter().enumerate() {
        let original = render_scene(11, idx as u64, "train", &spec);
        assert_eq!(sample.labels, original.labels, "labels must round-trip bit-exactly");
        for (a, b) in sample.depth.values.iter().zip(original.depth.values.iter()) {
            assert!((a - b).abs() <= 0.0005 + 1e-12, "depth {a} vs {b} off by > 0.5 mm");
        }
        for (a, b) in sample.image.iter().zip(original.image.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    // empty split: no error
    let empty = load_dataset(dir.path(), "val", &manifest).unwrap();
    assert!(empty.is_empty());
}

#[test]
fn depth_png_unit_convention() {
    // a stored value of 5000 mm loads as 5 m
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let mut sample = render_scene(0, 0, "train", &spec);
    sample.depth.values[(0, 0)] = 5.0;
    sample.depth.valid[(0, 0)] = true;
    sample.depth.values[(0, 1)] = 1.0;
    sample.depth.valid[(0, 1)] = false; // stored as 0 = invalid
    write_sample(dir.path(), "train", &sample).unwrap();
    spec.manifest().save(dir.path()).unwrap();
    let manifest = DatasetManifest::load(dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), "train", &manifest).unwrap();
    assert_abs_diff_eq!(loaded[0].depth.values[(0, 0)], 5.0, epsilon = 1e-9);
    assert!(!loaded[0].depth.valid[(0, 1)]);
}

#[test]
fn bad_label_file_is_rejected_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let mut sample = render_scene(0, 0, "train", &spec);
    sample.labels[(2, 2)] = 17; // outside 0..4 and not 255
    write_sample(dir.path(), "train", &sample).unwrap();
    spec.manifest().save(dir.path()).unwrap();
    let manifest = DatasetManifest::load(dir.path()).unwrap();
    let err = load_dataset(dir.path(), "train", &manifest).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("label"), "message: {msg}");
    assert!(msg.contains("scene_00000"), "message must name the file: {msg}");
}

#[test]
fn tensor_conversion_and_normalization() {
    let spec = tiny_spec();
    let sample = render_scene(5, 0, "train", &spec);
    let mut manifest = spec.manifest();

    // identity normalization leaves the image unchanged
    manifest.mean = [0.0; 3];
    manifest.std = [1.0; 3];
    let t = sample_to_tensors(&sample, &manifest).unwrap();
    for i in 0..spec.height {
        for j in 0..spec.width {
            for c in 0..3 {
                assert_eq!(t.image[IxDyn(&[c, i, j])], sample.image[(i, j, c)]);
            }
        }
    }

    // default normalization round-trips
    let manifest = spec.manifest();
    let t = sample_to_tensors(&sample, &manifest).unwrap();
    for i in 0..spec.height {
        for j in 0..spec.width {
            for c in 0..3 {
                let back = denormalize(c, t.image[IxDyn(&[c, i, j])], &manifest);
                assert_abs_diff_eq!(back, sample.image[(i, j, c)], epsilon = 1e-6);
            }
        }
    }

    // log depth anchors: background plane sits at d_max -> 1.0
    let range = DepthRange::new(spec.d_min, spec.d_max).unwrap();
    for i in 0..spec.height {
        for j in 0..spec.width {
            let l = t.log_depth[IxDyn(&[0, i, j])];
            assert!((0.0..=1.0).contains(&l));
            if sample.labels[(i, j)] == 0 {
                assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
            }
            let expect = crate::depth_space::log_depth_scalar(sample.depth.values[(i, j)], &range);
            assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
        }
    }
    assert_eq!(t.clamped, 0);
}
