//! The adversarial multi-task optimization loop: alternating critic and
//! generator updates, the polynomial learning-rate schedule, checkpointing,
//! evaluation, and the ablation harness.
//!
//! Determinism contract: every random decision is drawn from a fresh stream
//! keyed by `(seed, generator step, purpose)`, never from a long-lived RNG.
//! Resuming from a checkpoint therefore replays the exact same streams as an
//! uninterrupted run.

mod checkpoint;
mod optim;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    load_checkpoint, read_arrays, read_manifest, save_checkpoint, write_arrays,
    CheckpointManifest,
};
pub use optim::AdamW;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugConfig};
use crate::data::{sample_to_tensors, DatasetManifest, Sample, IGNORE_ID};
use crate::depth_space::{metric_depth_scalar, DepthMap, DepthRange};
use crate::losses::{
    critic_loss, depth_scale_invariant_loss, depth_scale_invariant_loss_log,
    generator_adversarial_loss, segmentation_ce_loss, total_loss, total_loss_var, LossReport,
    LossWeights,
};
use crate::metrics::{depth_metrics, DepthMetrics, SegAccumulator};
use crate::model::{
    build_critics, joint_map_from_ground_truth, joint_map_from_predictions, Critic, CriticMode,
    MultiTaskNet, NetConfig, ParamStore, Predictions, TaskSelection,
};
use crate::tensor::{Elem, Tape, Var};
use crate::{Error, Result};

/// How the depth head's normalized output maps to metric depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSpace {
    /// `d = d_min + l·(d_max − d_min)`.
    Linear,
    /// `l = log(d/d_min)/log(d_max/d_min)`, the near-range-weighted map.
    Log,
}

/// Every knob of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Critic updates performed before each generator update.
    pub critic_steps_per_gen: usize,
    pub critic_lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint every this many generator steps; 0 disables the schedule
    /// (a final checkpoint is still written).
    pub checkpoint_interval: usize,
    /// Evaluate every this many generator steps; 0 disables the schedule.
    pub eval_interval: usize,
    pub critic: CriticMode,
    pub depth_space: DepthSpace,
    pub augment: bool,
    pub aug: AugConfig,
    pub tasks: TaskSelection,
    /// Single-threaded data path with step-keyed RNG streams. The loop is
    /// always bit-deterministic today; the flag records intent for a future
    /// worker pool.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            weight_decay: 5e-2,
            poly_power: 0.9,
            total_steps: 2000,
            batch_size: 4,
            critic_steps_per_gen: 5,
            critic_lr: 2e-5,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 1000,
            eval_interval: 500,
            critic: CriticMode::One,
            depth_space: DepthSpace::Log,
            augment: true,
            aug: AugConfig::default(),
            tasks: TaskSelection::Both,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("critic_lr", self.critic_lr),
            ("poly_power", self.poly_power),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.critic_steps_per_gen == 0 {
            return Err(Error::Config("critic_steps_per_gen must be at least 1".into()));
        }
        if self.critic != CriticMode::None && self.tasks != TaskSelection::Both {
            return Err(Error::Config(
                "adversarial training needs both task heads; use critic = none for single-task runs"
                    .into(),
            ));
        }
        self.weights.validate()?;
        self.aug.validate()
    }

    /// True when the run carries an adversarial term at all. A zero-weight
    /// adversarial term is skipped entirely, so `beta_adv = 0` and
    /// `critic = none` are the same computation bit for bit.
    pub fn adversarial(&self) -> bool {
        self.critic != CriticMode::None && self.weights.beta_adv > 0.0
    }
}

/// `base·(1 − step/total)^power`, clamped to 0 past the end.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

// Purpose tags of the per-step RNG streams.
const P_INIT_GEN: u64 = 1;
const P_INIT_CRITIC: u64 = 2;
// generator batch at 3; each purpose's augment stream sits at purpose + 1
const P_BATCH: u64 = 3;
// critic sub-step `k` uses base + 3k (batch), +1 (augment), +2 (penalty)
const P_CRITIC_BASE: u64 = 1000;

/// A deterministic stream keyed by `(seed, step, purpose)`.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// One assembled mini-batch, everything in the element type of the run.
pub struct Batch<E: Elem> {
    /// `[B, 3, H, W]`, normalized.
    pub images: ArrayD<E>,
    /// `[B, 1, H, W]`, the depth target in the run's normalized space
    /// (log-ratio or linear), 0 on invalid pixels.
    pub gt_norm: ArrayD<E>,
    /// `[B, 1, H, W]`, natural log of metric depth, 0 on invalid pixels.
    pub gt_log_metric: ArrayD<E>,
    /// `[B, 1, H, W]`, metric depth clamped into range, 0 on invalid pixels.
    pub gt_metric: ArrayD<E>,
    /// `[B, 1, H, W]`.
    pub valid: ArrayD<bool>,
    /// `[B, H, W]`, integer labels as reals.
    pub labels: ArrayD<f64>,
}

/// Converts samples into stacked training tensors for `space`.
pub fn assemble_batch<E: Elem>(
    samples: &[Sample],
    manifest: &DatasetManifest,
    space: DepthSpace,
) -> Result<Batch<E>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let range = manifest.range()?;
    let (h, w) = samples[0].depth.shape();
    let b = samples.len();
    let mut images = ArrayD::<E>::zeros(IxDyn(&[b, 3, h, w]));
    let mut gt_norm = ArrayD::<E>::zeros(IxDyn(&[b, 1, h, w]));
    let mut gt_log_metric = ArrayD::<E>::zeros(IxDyn(&[b, 1, h, w]));
    let mut gt_metric = ArrayD::<E>::zeros(IxDyn(&[b, 1, h, w]));
    let mut valid = ArrayD::from_elem(IxDyn(&[b, 1, h, w]), false);
    let mut labels = ArrayD::<f64>::zeros(IxDyn(&[b, h, w]));
    let span = range.d_max - range.d_min;
    for (bi, s) in samples.iter().enumerate() {
        if s.depth.shape() != (h, w) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        let t = sample_to_tensors(s, manifest)?;
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    images[IxDyn(&[bi, c, i, j])] = E::from_f64(t.image[IxDyn(&[c, i, j])]);
                }
                let ok = t.valid[IxDyn(&[i, j])];
                valid[IxDyn(&[bi, 0, i, j])] = ok;
                labels[IxDyn(&[bi, i, j])] = t.labels[IxDyn(&[i, j])];
                if ok {
                    let d = range.clamp(s.depth.values[(i, j)]);
                    gt_metric[IxDyn(&[bi, 0, i, j])] = E::from_f64(d);
                    gt_log_metric[IxDyn(&[bi, 0, i, j])] = E::from_f64(d.ln());
                    gt_norm[IxDyn(&[bi, 0, i, j])] = E::from_f64(match space {
                        DepthSpace::Log => t.log_depth[IxDyn(&[0, i, j])],
                        DepthSpace::Linear => (d - range.d_min) / span,
                    });
                }
            }
        }
    }
    Ok(Batch {
        images,
        gt_norm,
        gt_log_metric,
        gt_metric,
        valid,
        labels,
    })
}

/// All mutable pieces of a run: both parameter stores, their optimizers, and
/// the step counter. The generator and the critics live in separate stores,
/// so one side's update cannot touch the other's parameters.
pub struct TrainState<E: Elem> {
    pub net_cfg: NetConfig,
    pub cfg: TrainConfig,
    pub net: MultiTaskNet,
    pub critics: Vec<Critic>,
    pub gen_store: ParamStore<E>,
    pub critic_store: ParamStore<E>,
    pub opt_gen: AdamW<E>,
    pub opt_critic: AdamW<E>,
    pub step: usize,
}

impl<E: Elem> TrainState<E> {
    pub fn new(net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gen_store = ParamStore::new();
        let mut rng_g = step_rng(cfg.seed, 0, P_INIT_GEN);
        let net = MultiTaskNet::build(net_cfg, cfg.tasks, &mut gen_store, &mut rng_g, None)?;
        let mut critic_store = ParamStore::new();
        let mut rng_c = step_rng(cfg.seed, 0, P_INIT_CRITIC);
        let critics = build_critics(net_cfg, cfg.critic, &mut critic_store, &mut rng_c)?;
        let opt_gen = AdamW::new(&gen_store);
        let opt_critic = AdamW::new(&critic_store);
        Ok(Self {
            net_cfg: net_cfg.clone(),
            cfg: cfg.clone(),
            net,
            critics,
            gen_store,
            critic_store,
            opt_gen,
            opt_critic,
            step: 0,
        })
    }
}

/// Builds the critic inputs from generator predictions, on-tape.
fn fake_maps<E: Elem>(
    tape: &Tape<E>,
    images: Var,
    preds: &Predictions,
    mode: CriticMode,
) -> Result<Vec<Var>> {
    let seg = preds
        .seg_logits
        .ok_or_else(|| Error::InvalidInput("adversarial training needs a segmentation head".into()))?;
    Ok(match mode {
        CriticMode::None => Vec::new(),
        CriticMode::One => vec![joint_map_from_predictions(tape, preds.log_depth, seg)?],
        CriticMode::Two => {
            let nhwk = tape.permute(seg, &[0, 2, 3, 1]);
            let probs = tape.softmax_last(nhwk);
            let probs = tape.permute(probs, &[0, 3, 1, 2]);
            vec![
                tape.concat(&[preds.log_depth, images], 1),
                tape.concat(&[probs, images], 1),
            ]
        }
    })
}

/// Builds the critic inputs from ground truth, as plain arrays.
fn real_maps<E: Elem>(
    batch: &Batch<E>,
    mode: CriticMode,
    num_classes: usize,
) -> Result<Vec<ArrayD<E>>> {
    let joint = joint_map_from_ground_truth(&batch.gt_norm, &batch.labels, num_classes, IGNORE_ID)?;
    Ok(match mode {
        CriticMode::None => Vec::new(),
        CriticMode::One => vec![joint.map],
        CriticMode::Two => {
            let depth = joint.map.slice_axis(Axis(1), ndarray::Slice::from(0..1));
            let onehot = joint.map.slice_axis(Axis(1), ndarray::Slice::from(1..));
            vec![
                ndarray::concatenate(Axis(1), &[depth, batch.images.view()])
                    .expect("concat shapes")
                    .as_standard_layout()
                    .to_owned(),
                ndarray::concatenate(Axis(1), &[onehot, batch.images.view()])
                    .expect("concat shapes")
                    .as_standard_layout()
                    .to_owned(),
            ]
        }
    })
}

/// Scalar summary of one critic update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticStepStats {
    pub l_critic: f64,
    pub gp: f64,
    pub mean_grad_norm: f64,
    /// `E[c(real)] − E[c(fake)]`.
    pub gap: f64,
}

/// Critic inputs for one batch, detached from any tape: ground-truth maps and
/// the frozen generator's outputs. Within one generator step the generator
/// does not move, so these can be computed once and reused by every critic
/// sub-step.
pub struct CriticMaps<E: Elem> {
    reals: Vec<ArrayD<E>>,
    fakes: Vec<ArrayD<E>>,
}

/// Runs the frozen generator once and materializes both critic inputs.
pub fn prepare_critic_maps<E: Elem>(
    state: &TrainState<E>,
    batch: &Batch<E>,
) -> Result<CriticMaps<E>> {
    if state.critics.is_empty() {
        return Err(Error::Config("critic step requested without a critic".into()));
    }
    let tape = Tape::new();
    let gi = state.gen_store.inject(&tape, false);
    let images = tape.constant(batch.images.clone());
    let preds = state.net.forward(&tape, &gi, images)?;
    let fakes = fake_maps(&tape, images, &preds, state.cfg.critic)?
        .into_iter()
        .map(|v| tape.value(v).to_owned())
        .collect();
    let reals = real_maps(batch, state.cfg.critic, state.net_cfg.num_classes)?;
    Ok(CriticMaps { reals, fakes })
}

/// One critic update on precomputed maps; the generator is not evaluated.
pub fn critic_update<E: Elem>(
    state: &mut TrainState<E>,
    maps: &CriticMaps<E>,
    rng: &mut ChaCha8Rng,
) -> Result<CriticStepStats> {
    let tape = Tape::new();
    let ci = state.critic_store.inject(&tape, true);

    let mut loss_vars = Vec::with_capacity(state.critics.len());
    let (mut l_sum, mut gp_sum, mut norm_sum, mut gap_sum) = (0.0, 0.0, 0.0, 0.0);
    for (i, critic) in state.critics.iter().enumerate() {
        let cl = critic_loss(
            &tape,
            &maps.reals[i],
            &maps.fakes[i],
            |t, x| critic.score(t, &ci, x),
            |t, x| critic.input_gradient(t, &ci, x),
            state.cfg.weights.lambda_gp,
            rng,
        )?;
        l_sum += tape.scalar_value(cl.loss).to_f64();
        gp_sum += cl.gp;
        norm_sum += cl.mean_grad_norm;
        gap_sum += cl.gap;
        loss_vars.push(cl.loss);
    }
    let n = state.critics.len() as f64;
    let loss = if loss_vars.len() == 1 {
        loss_vars[0]
    } else {
        let sum = tape.add(loss_vars[0], loss_vars[1]);
        tape.affine(sum, E::from_f64(1.0 / n), E::zero())
    };
    let grads = tape.backward(loss);
    state
        .opt_critic
        .step(&mut state.critic_store, &ci, &grads, state.cfg.critic_lr, 0.0);
    Ok(CriticStepStats {
        l_critic: l_sum / n,
        gp: gp_sum / n,
        mean_grad_norm: norm_sum / n,
        gap: gap_sum / n,
    })
}

/// One critic update on `batch` with the generator frozen.
pub fn train_critic_step<E: Elem>(
    state: &mut TrainState<E>,
    batch: &Batch<E>,
    rng: &mut ChaCha8Rng,
) -> Result<CriticStepStats> {
    let maps = prepare_critic_maps(state, batch)?;
    critic_update(state, &maps, rng)
}

/// The depth objective in the configured depth space.
fn depth_loss_term<E: Elem>(
    tape: &Tape<E>,
    cfg: &TrainConfig,
    range: &DepthRange,
    preds: &Predictions,
    batch: &Batch<E>,
) -> Result<Var> {
    let alpha = cfg.weights.alpha_si;
    match cfg.depth_space {
        DepthSpace::Log => {
            // ln(metric) is an affine map of the normalized log output, so the
            // loss stays entirely in log space
            let span = range.log_span();
            let pred_ln = tape.affine(
                preds.log_depth,
                E::from_f64(span),
                E::from_f64(range.d_min.ln()),
            );
            depth_scale_invariant_loss_log(tape, pred_ln, &batch.gt_log_metric, &batch.valid, alpha)
        }
        DepthSpace::Linear => {
            let pred_d = tape.affine(
                preds.log_depth,
                E::from_f64(range.d_max - range.d_min),
                E::from_f64(range.d_min),
            );
            depth_scale_invariant_loss(tape, pred_d, &batch.gt_metric, &batch.valid, alpha)
        }
    }
}

/// One generator update on `batch` with the critics frozen. `lr` is the
/// already-scheduled learning rate.
pub fn train_generator_step<E: Elem>(
    state: &mut TrainState<E>,
    batch: &Batch<E>,
    range: &DepthRange,
    lr: f64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let gi = state.gen_store.inject(&tape, true);
    let ci = state.critic_store.inject(&tape, false);
    let images = tape.constant(batch.images.clone());
    let preds = state.net.forward(&tape, &gi, images)?;

    // a head whose loss weight is exactly zero contributes nothing, so its
    // graph is skipped entirely: the run is then bit-identical to one that
    // never computed the term
    let has_depth = matches!(state.cfg.tasks, TaskSelection::DepthOnly | TaskSelection::Both)
        && state.cfg.weights.alpha_mix > 0.0;
    let has_seg = matches!(state.cfg.tasks, TaskSelection::SegOnly | TaskSelection::Both)
        && state.cfg.weights.alpha_mix < 1.0;

    let zero = tape.scalar(E::zero());
    let l_depth = if has_depth {
        depth_loss_term(&tape, &state.cfg, range, &preds, batch)?
    } else {
        zero
    };
    let l_seg = if has_seg {
        let logits = preds.seg_logits.expect("seg head present");
        segmentation_ce_loss(&tape, logits, &batch.labels, IGNORE_ID)?
    } else {
        zero
    };
    let adversarial = state.cfg.adversarial();
    let l_adv = if adversarial {
        let fakes = fake_maps(&tape, images, &preds, state.cfg.critic)?;
        let mut terms = Vec::with_capacity(fakes.len());
        for (i, critic) in state.critics.iter().enumerate() {
            terms.push(generator_adversarial_loss(&tape, fakes[i], |t, x| {
                critic.score(t, &ci, x)
            })?);
        }
        if terms.len() == 1 {
            terms[0]
        } else {
            tape.affine(tape.add(terms[0], terms[1]), E::from_f64(0.5), E::zero())
        }
    } else {
        zero
    };

    let eff = LossWeights {
        beta_adv: if adversarial { state.cfg.weights.beta_adv } else { 0.0 },
        ..state.cfg.weights
    };
    let total = total_loss_var(&tape, l_depth, l_seg, l_adv, &eff)?;
    let grads = tape.backward(total);
    state
        .opt_gen
        .step(&mut state.gen_store, &gi, &grads, lr, state.cfg.weight_decay);

    let (ld, ls, la) = (
        tape.scalar_value(l_depth).to_f64(),
        tape.scalar_value(l_seg).to_f64(),
        tape.scalar_value(l_adv).to_f64(),
    );
    Ok(LossReport {
        l_depth: ld,
        l_seg: ls,
        l_gen_adv: la,
        l_critic: 0.0,
        gp: 0.0,
        l_total: total_loss(ld, ls, la, &eff)?,
    })
}

/// Split-level evaluation numbers. Fields of a head the run does not carry
/// are `None` (serialized as `null`, keys always present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_log: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
    pub miou: Option<f64>,
    pub pixel_acc: Option<f64>,
}

/// Folds per-sample predictions into an [`EvalReport`]: depth metrics are
/// averaged per image then meaned, segmentation uses one global confusion
/// matrix.
pub fn evaluate_predictions<'a>(
    preds: impl Iterator<Item = (Option<DepthMap>, Option<ndarray::Array2<u32>>, &'a Sample)>,
    manifest: &DatasetManifest,
) -> Result<EvalReport> {
    let range = manifest.range()?;
    let mut depth_sums: Option<DepthMetrics> = None;
    let mut depth_count = 0usize;
    let mut seg = SegAccumulator::new(manifest.num_classes, manifest.ignore_id);
    let mut any = false;
    let mut any_seg = false;
    for (pred_depth, pred_labels, sample) in preds {
        any = true;
        if let Some(pd) = pred_depth {
            let m = depth_metrics(&pd, &sample.depth, &range)?;
            depth_count += 1;
            depth_sums = Some(match depth_sums {
                None => m,
                Some(acc) => DepthMetrics {
                    abs_rel: acc.abs_rel + m.abs_rel,
                    sq_rel: acc.sq_rel + m.sq_rel,
                    rmse: acc.rmse + m.rmse,
                    rmse_log: acc.rmse_log + m.rmse_log,
                    delta1: acc.delta1 + m.delta1,
                    delta2: acc.delta2 + m.delta2,
                    delta3: acc.delta3 + m.delta3,
                },
            });
        }
        if let Some(pl) = pred_labels {
            any_seg = true;
            seg.update(&pl.view(), &sample.labels.view())?;
        }
    }
    if !any {
        return Err(Error::InvalidInput("evaluation over an empty split".into()));
    }
    let depth = depth_sums.map(|acc| {
        let n = depth_count as f64;
        DepthMetrics {
            abs_rel: acc.abs_rel / n,
            sq_rel: acc.sq_rel / n,
            rmse: acc.rmse / n,
            rmse_log: acc.rmse_log / n,
            delta1: acc.delta1 / n,
            delta2: acc.delta2 / n,
            delta3: acc.delta3 / n,
        }
    });
    let seg = if any_seg { Some(seg.miou()?) } else { None };
    Ok(EvalReport {
        abs_rel: depth.map(|d| d.abs_rel),
        sq_rel: depth.map(|d| d.sq_rel),
        rmse: depth.map(|d| d.rmse),
        rmse_log: depth.map(|d| d.rmse_log),
        delta1: depth.map(|d| d.delta1),
        delta2: depth.map(|d| d.delta2),
        delta3: depth.map(|d| d.delta3),
        miou: seg.as_ref().map(|s| s.miou),
        pixel_acc: seg.as_ref().map(|s| s.pixel_acc),
    })
}

/// Per-sample inference: predicted metric depth and label maps.
pub fn predict_sample<E: Elem>(
    net: &MultiTaskNet,
    gen_store: &ParamStore<E>,
    manifest: &DatasetManifest,
    space: DepthSpace,
    samples: &[Sample],
) -> Result<Vec<(Option<DepthMap>, Option<ndarray::Array2<u32>>)>> {
    let batch = assemble_batch::<E>(samples, manifest, space)?;
    let range = manifest.range()?;
    let tape = Tape::<E>::new();
    let gi = gen_store.inject(&tape, false);
    let images = tape.constant(batch.images.clone());
    let preds = net.forward(&tape, &gi, images)?;
    let (h, w) = samples[0].depth.shape();
    let has_depth = matches!(net.tasks(), TaskSelection::DepthOnly | TaskSelection::Both);
    let dvals = tape.value(preds.log_depth);
    let svals = preds.seg_logits.map(|v| tape.value(v));
    let k = manifest.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for bi in 0..samples.len() {
        let depth = has_depth.then(|| {
            let mut m = ndarray::Array2::<f64>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let l = dvals[IxDyn(&[bi, 0, i, j])].to_f64();
                    m[(i, j)] = match space {
                        DepthSpace::Log => metric_depth_scalar(l, &range),
                        DepthSpace::Linear => range.d_min + l * (range.d_max - range.d_min),
                    };
                }
            }
            DepthMap::dense(m)
        });
        let labels = svals.as_ref().map(|sv| {
            ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
                let mut best = 0usize;
                let mut best_v = sv[IxDyn(&[bi, 0, i, j])];
                for c in 1..k {
                    let v = sv[IxDyn(&[bi, c, i, j])];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u32
            })
        });
        out.push((depth, labels));
    }
    Ok(out)
}

/// Runs inference over `samples` in chunks of `batch_size` and reports the
/// metric suite. Per-sample results do not depend on the chunking.
pub fn evaluate<E: Elem>(
    net: &MultiTaskNet,
    gen_store: &ParamStore<E>,
    manifest: &DatasetManifest,
    space: DepthSpace,
    samples: &[Sample],
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("evaluation over an empty split".into()));
    }
    let bs = batch_size.max(1);
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(bs) {
        all.extend(predict_sample(net, gen_store, manifest, space, chunk)?);
    }
    evaluate_predictions(
        all.into_iter()
            .zip(samples.iter())
            .map(|((d, l), s)| (d, l, s)),
        manifest,
    )
}

/// One line of `log.records`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
    pub mean_grad_norm: f64,
    pub gap: f64,
}

/// Everything a finished (or aborted-cleanly) run reports back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(usize, EvalReport)>,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_secs: f64,
}

fn append_record(out_dir: Option<&Path>, rec: &StepRecord) -> Result<()> {
    if let Some(dir) = out_dir {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("log.records"))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

fn write_eval(out_dir: Option<&Path>, step: usize, report: &EvalReport) -> Result<()> {
    if let Some(dir) = out_dir {
        let eval_dir = dir.join("eval");
        fs::create_dir_all(&eval_dir)?;
        fs::write(
            eval_dir.join(format!("step_{step:06}.report")),
            serde_json::to_string_pretty(report)? + "\n",
        )?;
    }
    Ok(())
}

/// The full training loop. `resume` continues bit-exactly from a checkpoint
/// written by a run with identical configuration. When `out_dir` is given the
/// run directory (`log.records`, `checkpoints/step_%06d`,
/// `eval/step_%06d.report`) is maintained; the caller owns `config.snapshot`.
pub fn fit<E: Elem>(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(TrainState<E>, TrainReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let range = manifest.range()?;
    let started = Instant::now();

    let mut state = match resume {
        Some(dir) => load_checkpoint::<E>(dir, Some((net_cfg, cfg)))?,
        None => TrainState::new(net_cfg, cfg)?,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }

    let mut report = TrainReport {
        seed: cfg.seed,
        steps: Vec::new(),
        evals: Vec::new(),
        final_checkpoint: None,
        wall_secs: 0.0,
    };

    let run_eval = |state: &TrainState<E>, report: &mut TrainReport| -> Result<Option<EvalReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        let ev = evaluate(
            &state.net,
            &state.gen_store,
            manifest,
            cfg.depth_space,
            val,
            cfg.batch_size,
        )?;
        write_eval(out_dir, state.step, &ev)?;
        report.evals.push((state.step, ev.clone()));
        Ok(Some(ev))
    };

    if state.step == 0 {
        run_eval(&state, &mut report)?;
    }

    let make_batch = |step: u64, purpose: u64| -> Result<Batch<E>> {
        let mut rng_b = step_rng(cfg.seed, step, purpose);
        let mut picked: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| train[rng_b.random_range(0..train.len())].clone())
            .collect();
        if cfg.augment {
            let mut rng_a = step_rng(cfg.seed, step, purpose + 1);
            picked = augment_batch(&picked, &mut rng_a, &cfg.aug)?;
        }
        assemble_batch::<E>(&picked, manifest, cfg.depth_space)
    };

    let mut last_eval: Option<EvalReport> = None;
    while state.step < cfg.total_steps {
        let gstep = state.step as u64;

        let mut critic_stats: Option<CriticStepStats> = None;
        if cfg.adversarial() {
            // the generator is frozen for the whole critic cycle, so its
            // outputs are computed once and shared by every sub-step; only
            // the gradient-penalty noise is fresh per sub-step
            let batch = make_batch(gstep, P_CRITIC_BASE)?;
            let maps = prepare_critic_maps(&state, &batch)?;
            for k in 0..cfg.critic_steps_per_gen {
                let mut rng_gp = step_rng(cfg.seed, gstep, P_CRITIC_BASE + 3 * k as u64 + 2);
                let stats = critic_update(&mut state, &maps, &mut rng_gp)
                    .map_err(|e| diverged(state.step, e))?;
                critic_stats = Some(stats);
            }
        }

        let batch = make_batch(gstep, P_BATCH)?;
        let lr = poly_lr(cfg.base_lr, state.step, cfg.total_steps, cfg.poly_power);
        let mut step_report = train_generator_step(&mut state, &batch, &range, lr)
            .map_err(|e| diverged(state.step, e))?;
        if let Some(cs) = critic_stats {
            step_report.l_critic = cs.l_critic;
            step_report.gp = cs.gp;
        }
        state.step += 1;

        let rec = StepRecord {
            step: state.step,
            lr,
            report: step_report,
            mean_grad_norm: critic_stats.map_or(0.0, |c| c.mean_grad_norm),
            gap: critic_stats.map_or(0.0, |c| c.gap),
        };
        append_record(out_dir, &rec)?;
        report.steps.push(rec);

        let at_end = state.step == cfg.total_steps;
        if cfg.eval_interval > 0 && (state.step % cfg.eval_interval == 0 || at_end) {
            last_eval = run_eval(&state, &mut report)?;
        }
        if let Some(dir) = out_dir {
            let scheduled =
                cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0;
            if scheduled || at_end {
                let ckpt = dir.join("checkpoints").join(format!("step_{:06}", state.step));
                save_checkpoint(&ckpt, &state, last_eval.as_ref())?;
                if at_end {
                    report.final_checkpoint = Some(ckpt);
                }
            }
        }
    }

    // a zero-step run still leaves a usable checkpoint behind
    if report.final_checkpoint.is_none() {
        if let Some(dir) = out_dir {
            let ckpt = dir.join("checkpoints").join(format!("step_{:06}", state.step));
            save_checkpoint(&ckpt, &state, last_eval.as_ref())?;
            report.final_checkpoint = Some(ckpt);
        }
    }
    report.wall_secs = started.elapsed().as_secs_f64();
    Ok((state, report))
}

/// Wraps non-finite losses as a divergence at a known step; other errors pass
/// through unchanged. Checkpoints already on disk are retained.
fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Divergence { step, msg },
        other => other,
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub tasks: TaskSelection,
    pub critic: CriticMode,
    pub depth_space: DepthSpace,
    pub eval: EvalReport,
    pub param_count: usize,
}

/// The seven studied variants, all sharing `base`'s seed and budget:
/// single-task baselines, the critic sweep, and the depth-space comparison.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mk = |tasks, critic, space, alpha_mix: Option<f64>| {
        let mut c = base.clone();
        c.tasks = tasks;
        c.critic = critic;
        c.depth_space = space;
        if let Some(a) = alpha_mix {
            c.weights.alpha_mix = a;
        }
        c
    };
    vec![
        (
            "only Depth".into(),
            mk(TaskSelection::DepthOnly, CriticMode::None, DepthSpace::Log, Some(1.0)),
        ),
        (
            "only Seg".into(),
            mk(TaskSelection::SegOnly, CriticMode::None, DepthSpace::Log, Some(0.0)),
        ),
        (
            "w/o Critic".into(),
            mk(TaskSelection::Both, CriticMode::None, DepthSpace::Log, None),
        ),
        (
            "w one Critic".into(),
            mk(TaskSelection::Both, CriticMode::One, DepthSpace::Log, None),
        ),
        (
            "w two Critics".into(),
            mk(TaskSelection::Both, CriticMode::Two, DepthSpace::Log, None),
        ),
        (
            "Linear Space".into(),
            mk(TaskSelection::Both, CriticMode::None, DepthSpace::Linear, None),
        ),
        (
            "Log Space".into(),
            mk(TaskSelection::Both, CriticMode::None, DepthSpace::Log, None),
        ),
    ]
}

/// Trains every ablation variant and evaluates it on `val`. When `out_dir` is
/// given, each variant runs in its own subdirectory.
pub fn run_ablation<E: Elem>(
    net_cfg: &NetConfig,
    base: &TrainConfig,
    manifest: &DatasetManifest,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (i, (name, cfg)) in ablation_variants(base).into_iter().enumerate() {
        let sub = out_dir.map(|d| d.join(format!("row{i}_{}", slug(&name))));
        if let Some(dir) = &sub {
            fs::create_dir_all(dir)?;
        }
        let (state, _report) = fit::<E>(
            net_cfg,
            &cfg,
            manifest,
            train,
            val,
            sub.as_deref(),
            None,
        )?;
        let eval = evaluate(
            &state.net,
            &state.gen_store,
            manifest,
            cfg.depth_space,
            val,
            cfg.batch_size,
        )?;
        rows.push(AblationRow {
            name,
            tasks: cfg.tasks,
            critic: cfg.critic,
            depth_space: cfg.depth_space,
            eval,
            param_count: state.gen_store.count_scalars(),
        });
    }
    Ok(rows)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Renders the ablation rows as a fixed-width table with AbsRel and mIoU
/// columns.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>10} {:>10} {:>12}\n",
        "variant", "AbsRel", "mIoU", "params"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>10} {:>10} {:>12}\n",
            r.name,
            fmt(r.eval.abs_rel),
            fmt(r.eval.miou),
            r.param_count
        ));
    }
    out
}
