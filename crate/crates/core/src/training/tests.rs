use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{render_scene, SyntheticSpec};
use crate::depth_space::log_depth_scalar;
use crate::losses::LossWeights;
use crate::model::{CriticMode, TaskSelection};

use super::*;

fn tiny_net() -> NetConfig {
    NetConfig {
        num_classes: 4,
        patch_size: 4,
        window_size: 2,
        embed_dim: 8,
        depths: vec![1, 1],
        heads: vec![2, 2],
        decoder_channels: 8,
        image_height: 16,
        image_width: 16,
        critic_base_channels: 4,
        ..NetConfig::default()
    }
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        height: 16,
        width: 16,
        num_classes: 4,
        ..SyntheticSpec::default()
    }
}

fn tiny_data(n: usize) -> (DatasetManifest, Vec<Sample>) {
    let spec = tiny_spec();
    let samples = (0..n)
        .map(|i| render_scene(7, i as u64, "train", &spec))
        .collect();
    (spec.manifest(), samples)
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        total_steps: 3,
        batch_size: 2,
        critic_steps_per_gen: 1,
        checkpoint_interval: 0,
        eval_interval: 0,
        augment: false,
        ..TrainConfig::default()
    }
}

fn store_bytes<E: Elem>(store: &ParamStore<E>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, arr) in store.iter() {
        out.extend_from_slice(name.as_bytes());
        for &v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    out
}

#[test]
fn poly_lr_anchors_and_monotonicity() {
    assert_eq!(poly_lr(5e-4, 0, 100, 0.9), 5e-4);
    assert_eq!(poly_lr(5e-4, 100, 100, 0.9), 0.0);
    assert_eq!(poly_lr(5e-4, 150, 100, 0.9), 0.0);
    let mid = poly_lr(5e-4, 50, 100, 0.9);
    approx::assert_abs_diff_eq!(mid, 5e-4 * 0.5f64.powf(0.9), epsilon = 1e-18);
    // 5e-4 · 0.5^0.9 = 2.67943e-4 (a commonly cited rounding is 2.679e-4)
    approx::assert_abs_diff_eq!(mid, 2.679433656340733e-4, epsilon = 1e-15);
    let mut prev = f64::INFINITY;
    for step in 0..=100 {
        let lr = poly_lr(5e-4, step, 100, 0.9);
        assert!(lr <= prev, "poly_lr increased at step {step}");
        prev = lr;
    }
}

#[test]
fn config_validation() {
    assert!(tiny_cfg().validate().is_ok());
    let mut c = tiny_cfg();
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg();
    c.critic_steps_per_gen = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg();
    c.tasks = TaskSelection::DepthOnly;
    c.critic = CriticMode::One;
    assert!(c.validate().is_err());
    c.critic = CriticMode::None;
    assert!(c.validate().is_ok());
}

#[test]
fn batch_assembly_matches_scalar_transforms() {
    let (manifest, samples) = tiny_data(2);
    let range = manifest.range().unwrap();
    let b: Batch<f64> = assemble_batch(&samples, &manifest, DepthSpace::Log).unwrap();
    let bl: Batch<f64> = assemble_batch(&samples, &manifest, DepthSpace::Linear).unwrap();
    assert_eq!(b.images.shape(), &[2, 3, 16, 16]);
    for (bi, s) in samples.iter().enumerate() {
        for i in 0..16 {
            for j in 0..16 {
                let d = s.depth.values[(i, j)];
                approx::assert_abs_diff_eq!(
                    b.gt_norm[IxDyn(&[bi, 0, i, j])],
                    log_depth_scalar(d, &range),
                    epsilon = 1e-12
                );
                approx::assert_abs_diff_eq!(
                    bl.gt_norm[IxDyn(&[bi, 0, i, j])],
                    (range.clamp(d) - range.d_min) / (range.d_max - range.d_min),
                    epsilon = 1e-12
                );
                approx::assert_abs_diff_eq!(
                    b.gt_log_metric[IxDyn(&[bi, 0, i, j])],
                    range.clamp(d).ln(),
                    epsilon = 1e-12
                );
                assert_eq!(b.labels[IxDyn(&[bi, i, j])], f64::from(s.labels[(i, j)]));
                assert!(b.valid[IxDyn(&[bi, 0, i, j])]);
            }
        }
    }
}

#[test]
fn critic_loss_is_zero_with_zero_final_layer_and_no_penalty() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.weights.lambda_gp = 0.0;
    let mut state = TrainState::<f32>::new(&net_cfg, &cfg).unwrap();
    // zero the critic's scoring layer: all scores become 0
    for id in state.critic_store.ids().collect::<Vec<_>>() {
        let name = state.critic_store.name(id).to_string();
        if name.ends_with("fc.weight") || name.ends_with("fc.bias") {
            let z = ndarray::ArrayD::zeros(state.critic_store.get(id).raw_dim());
            state.critic_store.set(id, z);
        }
    }
    let (manifest, samples) = tiny_data(2);
    let batch = assemble_batch(&samples, &manifest, cfg.depth_space).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stats = train_critic_step(&mut state, &batch, &mut rng).unwrap();
    assert_eq!(stats.l_critic, 0.0);
    assert_eq!(stats.gap, 0.0);
}

#[test]
fn critic_learns_to_separate_real_from_fake() {
    let net_cfg = tiny_net();
    let cfg = tiny_cfg();
    let mut state = TrainState::<f32>::new(&net_cfg, &cfg).unwrap();
    let (manifest, samples) = tiny_data(4);
    let batch = assemble_batch(&samples, &manifest, cfg.depth_space).unwrap();
    let mut last_gap = 0.0;
    for step in 0..200 {
        let mut rng = step_rng(0, step, 77);
        last_gap = train_critic_step(&mut state, &batch, &mut rng).unwrap().gap;
    }
    assert!(
        last_gap > 0.0,
        "critic failed to separate real from fake: gap {last_gap}"
    );
}

#[test]
fn fit_is_deterministic_given_seed() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.augment = true;
    let (manifest, samples) = tiny_data(6);
    let run = || fit::<f32>(&net_cfg, &cfg, &manifest, &samples, &[], None, None).unwrap();
    let (s1, r1) = run();
    let (s2, r2) = run();
    assert_eq!(store_bytes(&s1.gen_store), store_bytes(&s2.gen_store));
    assert_eq!(store_bytes(&s1.critic_store), store_bytes(&s2.critic_store));
    for (a, b) in r1.steps.iter().zip(r2.steps.iter()) {
        assert_eq!(a.report.l_total, b.report.l_total);
        assert_eq!(a.report.l_critic, b.report.l_critic);
    }
}

#[test]
fn critic_and_generator_parameters_are_isolated() {
    let net_cfg = tiny_net();
    let cfg = tiny_cfg();
    let mut state = TrainState::<f32>::new(&net_cfg, &cfg).unwrap();
    let (manifest, samples) = tiny_data(2);
    let range = manifest.range().unwrap();
    let batch = assemble_batch(&samples, &manifest, cfg.depth_space).unwrap();

    let gen_before = store_bytes(&state.gen_store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    train_critic_step(&mut state, &batch, &mut rng).unwrap();
    assert_eq!(gen_before, store_bytes(&state.gen_store), "critic step moved the generator");

    let critic_after_step = store_bytes(&state.critic_store);
    train_generator_step(&mut state, &batch, &range, 1e-4).unwrap();
    assert_eq!(
        critic_after_step,
        store_bytes(&state.critic_store),
        "generator step moved the critic"
    );
    assert_ne!(gen_before, store_bytes(&state.gen_store), "generator did not move at all");
}

#[test]
fn critic_none_is_bit_identical_to_zero_adversarial_weight() {
    let net_cfg = tiny_net();
    let (manifest, samples) = tiny_data(6);
    let mut none_cfg = tiny_cfg();
    none_cfg.critic = CriticMode::None;
    let mut zero_cfg = tiny_cfg();
    zero_cfg.critic = CriticMode::One;
    zero_cfg.weights.beta_adv = 0.0;
    let (a, _) = fit::<f32>(&net_cfg, &none_cfg, &manifest, &samples, &[], None, None).unwrap();
    let (b, _) = fit::<f32>(&net_cfg, &zero_cfg, &manifest, &samples, &[], None, None).unwrap();
    assert_eq!(store_bytes(&a.gen_store), store_bytes(&b.gen_store));
}

#[test]
fn zero_weight_segmentation_leaves_the_head_untouched() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.critic = CriticMode::None;
    cfg.weights.alpha_mix = 1.0; // depth only in the objective
    let mut state = TrainState::<f32>::new(&net_cfg, &cfg).unwrap();
    let (manifest, samples) = tiny_data(2);
    let range = manifest.range().unwrap();
    let batch = assemble_batch(&samples, &manifest, cfg.depth_space).unwrap();

    let seg_before: Vec<Vec<u8>> = state
        .gen_store
        .ids()
        .filter(|&id| state.gen_store.name(id).starts_with("gen.seg_head"))
        .map(|id| {
            state
                .gen_store
                .get(id)
                .iter()
                .flat_map(|v| v.to_le_bytes_vec())
                .collect()
        })
        .collect();
    assert!(!seg_before.is_empty());
    let report = train_generator_step(&mut state, &batch, &range, 1e-3).unwrap();
    assert_eq!(report.l_seg, 0.0);
    let seg_after: Vec<Vec<u8>> = state
        .gen_store
        .ids()
        .filter(|&id| state.gen_store.name(id).starts_with("gen.seg_head"))
        .map(|id| {
            state
                .gen_store
                .get(id)
                .iter()
                .flat_map(|v| v.to_le_bytes_vec())
                .collect()
        })
        .collect();
    assert_eq!(seg_before, seg_after);
}

#[test]
fn generator_step_descends_on_a_frozen_batch() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.critic = CriticMode::None;
    cfg.weight_decay = 0.0;
    let mut state = TrainState::<f64>::new(&net_cfg, &cfg).unwrap();
    let (manifest, samples) = tiny_data(2);
    let range = manifest.range().unwrap();
    let batch = assemble_batch::<f64>(&samples, &manifest, cfg.depth_space).unwrap();

    let loss_of = |state: &TrainState<f64>| -> f64 {
        let tape = Tape::<f64>::new();
        let gi = state.gen_store.inject(&tape, false);
        let images = tape.constant(batch.images.clone());
        let preds = state.net.forward(&tape, &gi, images).unwrap();
        let ld = depth_loss_term(&tape, &state.cfg, &range, &preds, &batch).unwrap();
        let ls = crate::losses::segmentation_ce_loss(
            &tape,
            preds.seg_logits.unwrap(),
            &batch.labels,
            IGNORE_ID,
        )
        .unwrap();
        total_loss(
            tape.scalar_value(ld),
            tape.scalar_value(ls),
            0.0,
            &state.cfg.weights,
        )
        .unwrap()
    };
    let before = loss_of(&state);
    let report = train_generator_step(&mut state, &batch, &range, cfg.base_lr / 100.0).unwrap();
    approx::assert_abs_diff_eq!(report.l_total, before, epsilon = 1e-12);
    let after = loss_of(&state);
    assert!(after < before, "no descent: {before} -> {after}");
}

#[test]
fn loss_report_reproduces_the_weighted_combination() {
    let w = LossWeights {
        alpha_si: 0.5,
        alpha_mix: 0.3,
        beta_adv: 0.01,
        lambda_gp: 10.0,
    };
    let t = total_loss(1.25, 0.75, -2.0, &w).unwrap();
    assert_eq!(t, 0.3 * 1.25 + 0.7 * 0.75 + 0.01 * -2.0);
}

#[test]
fn fit_zero_steps_reports_initial_eval_only() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.total_steps = 0;
    cfg.eval_interval = 1;
    let (manifest, samples) = tiny_data(3);
    let dir = tempfile::tempdir().unwrap();
    let (state, report) = fit::<f32>(
        &net_cfg,
        &cfg,
        &manifest,
        &samples,
        &samples,
        Some(dir.path()),
        None,
    )
    .unwrap();
    assert_eq!(state.step, 0);
    assert!(report.steps.is_empty());
    assert_eq!(report.evals.len(), 1);
    assert_eq!(report.evals[0].0, 0);
    let ckpt = report.final_checkpoint.unwrap();
    assert!(ckpt.join("manifest.json").exists());
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.total_steps = 6;
    cfg.checkpoint_interval = 3;
    cfg.augment = true;
    let (manifest, samples) = tiny_data(6);

    let dir_full = tempfile::tempdir().unwrap();
    let (full, _) = fit::<f32>(
        &net_cfg,
        &cfg,
        &manifest,
        &samples,
        &[],
        Some(dir_full.path()),
        None,
    )
    .unwrap();

    let dir_resume = tempfile::tempdir().unwrap();
    let ckpt = dir_full.path().join("checkpoints").join("step_000003");
    let (resumed, _) = fit::<f32>(
        &net_cfg,
        &cfg,
        &manifest,
        &samples,
        &[],
        Some(dir_resume.path()),
        Some(&ckpt),
    )
    .unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(store_bytes(&full.gen_store), store_bytes(&resumed.gen_store));
    assert_eq!(
        store_bytes(&full.critic_store),
        store_bytes(&resumed.critic_store)
    );
}

#[test]
fn checkpoint_rejects_mismatched_configuration() {
    let net_cfg = tiny_net();
    let cfg = tiny_cfg();
    let (manifest, samples) = tiny_data(2);
    let dir = tempfile::tempdir().unwrap();
    let (_state, report) = fit::<f32>(
        &net_cfg,
        &cfg,
        &manifest,
        &samples,
        &[],
        Some(dir.path()),
        None,
    )
    .unwrap();
    let ckpt = report.final_checkpoint.unwrap();

    let mut other_net = tiny_net();
    other_net.embed_dim = 16;
    let err = load_checkpoint::<f32>(&ckpt, Some((&other_net, &cfg))).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)), "got {err}");

    let mut other_cfg = cfg.clone();
    other_cfg.seed = 99;
    let err = load_checkpoint::<f32>(&ckpt, Some((&net_cfg, &other_cfg))).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)));

    // wrong element type is also refused
    let err = load_checkpoint::<f64>(&ckpt, None).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)));
}

#[test]
fn array_container_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arrays.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arrays: Vec<(String, ndarray::ArrayD<f32>)> = (0..4)
        .map(|i| {
            let shape = [1 + i, 2, 3];
            (
                format!("arr{i}.weight"),
                ndarray::ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                    rand::Rng::random_range(&mut rng, -1.0f32..1.0)
                }),
            )
        })
        .collect();
    write_arrays(&path, &arrays).unwrap();
    let back = read_arrays::<f32>(&path).unwrap();
    assert_eq!(arrays.len(), back.len());
    for ((n1, a1), (n2, a2)) in arrays.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a1.shape(), a2.shape());
        for (x, y) in a1.iter().zip(a2.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    assert!(read_arrays::<f64>(&path).is_err());
}

#[test]
fn evaluating_ground_truth_as_predictions_is_perfect() {
    let (manifest, samples) = tiny_data(3);
    let report = evaluate_predictions(
        samples
            .iter()
            .map(|s| (Some(s.depth.clone()), Some(s.labels.clone()), s)),
        &manifest,
    )
    .unwrap();
    assert_eq!(report.abs_rel.unwrap(), 0.0);
    assert_eq!(report.rmse.unwrap(), 0.0);
    assert_eq!(report.delta1.unwrap(), 1.0);
    assert_eq!(report.delta3.unwrap(), 1.0);
    assert_eq!(report.miou.unwrap(), 1.0);
    assert_eq!(report.pixel_acc.unwrap(), 1.0);
}

#[test]
fn evaluation_is_invariant_to_batch_size() {
    let net_cfg = tiny_net();
    let cfg = tiny_cfg();
    let state = TrainState::<f32>::new(&net_cfg, &cfg).unwrap();
    let (manifest, samples) = tiny_data(5);
    let a = evaluate(
        &state.net,
        &state.gen_store,
        &manifest,
        cfg.depth_space,
        &samples,
        1,
    )
    .unwrap();
    let b = evaluate(
        &state.net,
        &state.gen_store,
        &manifest,
        cfg.depth_space,
        &samples,
        3,
    )
    .unwrap();
    assert_eq!(a, b);
    let err = evaluate(
        &state.net,
        &state.gen_store,
        &manifest,
        cfg.depth_space,
        &[],
        1,
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn ablation_grid_lists_the_seven_variants() {
    let rows = ablation_variants(&tiny_cfg());
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "only Depth",
            "only Seg",
            "w/o Critic",
            "w one Critic",
            "w two Critics",
            "Linear Space",
            "Log Space"
        ]
    );
    for (name, cfg) in &rows {
        cfg.validate().unwrap_or_else(|e| panic!("row {name}: {e}"));
    }
}

#[test]
fn divergence_is_reported_with_its_step() {
    let net_cfg = tiny_net();
    let mut cfg = tiny_cfg();
    cfg.critic = CriticMode::None;
    cfg.base_lr = 1e12; // drives the logits non-finite within a step or two
    cfg.total_steps = 5;
    let (manifest, samples) = tiny_data(2);
    let err = fit::<f32>(&net_cfg, &cfg, &manifest, &samples, &[], None, None).err().unwrap();
    assert!(
        matches!(err, Error::Divergence { .. } | Error::InvalidInput(_)),
        "expected divergence, got {err}"
    );
}
