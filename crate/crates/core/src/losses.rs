//! Training objectives: scale-invariant depth loss, segmentation
//! cross-entropy, Wasserstein critic/generator losses with gradient penalty,
//! and the balanced total.
//!
//! Sign convention: the critic MINIMIZES `E[c(fake)] - E[c(real)] + λ·GP` and
//! the generator MINIMIZES `-E[c(fake)]`, the standard minimization form of
//! the min-max objective.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tape, Var};
use crate::{Error, Result};

/// The scalar weights of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// The α inside the scale-invariant depth loss.
    pub alpha_si: f64,
    /// Mixing weight between depth and segmentation losses, in [0,1].
    pub alpha_mix: f64,
    /// Weight of the generator's adversarial term.
    pub beta_adv: f64,
    /// Gradient-penalty coefficient.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_si: 0.5,
            alpha_mix: 0.5,
            beta_adv: 0.01,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_si) || !self.alpha_si.is_finite() {
            return Err(Error::Config(format!(
                "alpha_si must lie in [0,1], got {}",
                self.alpha_si
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) || !self.alpha_mix.is_finite() {
            return Err(Error::Config(format!(
                "alpha_mix must lie in [0,1], got {}",
                self.alpha_mix
            )));
        }
        if self.beta_adv < 0.0 || !self.beta_adv.is_finite() {
            return Err(Error::Config(format!(
                "beta_adv must be a finite non-negative number, got {}",
                self.beta_adv
            )));
        }
        if self.lambda_gp < 0.0 || !self.lambda_gp.is_finite() {
            return Err(Error::Config(format!(
                "lambda_gp must be a finite non-negative number, got {}",
                self.lambda_gp
            )));
        }
        Ok(())
    }
}

/// Per-step scalar summary of every objective term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_depth: f64,
    pub l_seg: f64,
    pub l_gen_adv: f64,
    pub l_critic: f64,
    pub gp: f64,
    pub l_total: f64,
}

/// Scale-invariant depth loss over positive depths (applies the log itself):
/// per image, `(1/N)Σe² − (α/N²)(Σe)²` with `e = log pred − log gt` on valid
/// pixels, then averaged over the batch.
pub fn depth_scale_invariant_loss<E: Elem>(
    tape: &Tape<E>,
    pred: Var,
    gt: &ArrayD<E>,
    valid: &ArrayD<bool>,
    alpha_si: f64,
) -> Result<Var> {
    let pv = tape.value(pred);
    for (i, (&p, &m)) in pv.iter().zip(valid.iter()).enumerate() {
        if m && p.to_f64() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "non-positive depth prediction {} at valid flat index {i}",
                p.to_f64()
            )));
        }
    }
    let gt_log = gt.mapv(|v| {
        if v.to_f64() > 0.0 {
            E::from_f64(v.to_f64().ln())
        } else {
            E::zero() // masked out below
        }
    });
    let pred_log = tape.ln(pred);
    depth_scale_invariant_loss_log(tape, pred_log, &gt_log, valid, alpha_si)
}

/// Same loss with both inputs already in log space (any fixed log base shift
/// cancels inside `e`). `pred_log` and `gt_log` are `[B, ...]`; `valid` has
/// the same shape.
pub fn depth_scale_invariant_loss_log<E: Elem>(
    tape: &Tape<E>,
    pred_log: Var,
    gt_log: &ArrayD<E>,
    valid: &ArrayD<bool>,
    alpha_si: f64,
) -> Result<Var> {
    let shape = tape.shape(pred_log);
    if shape.as_slice() != gt_log.shape() || shape.as_slice() != valid.shape() {
        return Err(Error::Shape(format!(
            "depth loss shapes disagree: pred {:?}, gt {:?}, mask {:?}",
            shape,
            gt_log.shape(),
            valid.shape()
        )));
    }
    let b = shape[0];
    if b == 0 {
        return Err(Error::InvalidInput("depth loss on an empty batch".into()));
    }
    let mask = valid.mapv(|m| if m { E::one() } else { E::zero() });
    let per_image = valid.len() / b;
    let mut inv_n = ArrayD::<E>::zeros(IxDyn(&[b]));
    for bi in 0..b {
        let n = valid
            .as_slice()
            .expect("contiguous mask")
            .iter()
            .skip(bi * per_image)
            .take(per_image)
            .filter(|&&m| m)
            .count();
        if n == 0 {
            return Err(Error::InvalidInput(format!(
                "image {bi} has no valid depth pixels"
            )));
        }
        inv_n[IxDyn(&[bi])] = E::from_f64(1.0 / n as f64);
    }

    let diff = tape.sub(pred_log, tape.constant(gt_log.clone()));
    let e = tape.mul_const(diff, mask);
    let s2 = tape.sum_per_sample(tape.sqr(e)); // [B]
    let s1 = tape.sum_per_sample(e); // [B]
    let term1 = tape.mul_const(s2, inv_n.clone());
    let s1_over_n = tape.mul_const(s1, inv_n);
    let term2 = tape.affine(tape.sqr(s1_over_n), E::from_f64(-alpha_si), E::zero());
    tape_finite(tape, tape.mean_all(tape.add(term1, term2)), "depth loss")
}

/// Mean `-log softmax(logits)[label]` over non-ignored pixels.
/// `logits: [B, K, H, W]`, `labels: [B, H, W]` (integer-valued reals).
pub fn segmentation_ce_loss<E: Elem>(
    tape: &Tape<E>,
    logits: Var,
    labels: &ArrayD<f64>,
    ignore_id: u32,
) -> Result<Var> {
    let shape = tape.shape(logits);
    let ls = labels.shape();
    if shape.len() != 4 || ls.len() != 3 || shape[0] != ls[0] || shape[2] != ls[1] || shape[3] != ls[2]
    {
        return Err(Error::Shape(format!(
            "CE loss expects logits [B,K,H,W] with labels [B,H,W], got {shape:?} and {ls:?}"
        )));
    }
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);

    // one-hot selector over the class axis placed last
    let mut onehot = ArrayD::<E>::zeros(IxDyn(&[b, h, w, k]));
    let mut kept = 0usize;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let raw = labels[IxDyn(&[bi, i, j])];
                if !raw.is_finite() || raw.fract() != 0.0 || raw < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "label at ({bi}, {i}, {j}) is not a non-negative integer: {raw}"
                    )));
                }
                let id = raw as u32;
                if id == ignore_id {
                    continue;
                }
                if id as usize >= k {
                    return Err(Error::InvalidInput(format!(
                        "label {id} at ({bi}, {i}, {j}) outside 0..{k} and not the ignore id {ignore_id}"
                    )));
                }
                onehot[IxDyn(&[bi, i, j, id as usize])] = E::one();
                kept += 1;
            }
        }
    }
    if kept == 0 {
        return Err(Error::InvalidInput(
            "CE loss: every pixel carries the ignore id".into(),
        ));
    }

    let nhwk = tape.permute(logits, &[0, 2, 3, 1]);
    let logp = tape.log_softmax_last(nhwk);
    let picked = tape.mul_const(logp, onehot);
    let total = tape.sum_all(picked);
    tape_finite(
        tape,
        tape.affine(total, E::from_f64(-1.0 / kept as f64), E::zero()),
        "segmentation loss",
    )
}

/// The outputs of [`gradient_penalty`]: the differentiable penalty and the
/// mean interpolated gradient norm (a training-health statistic).
pub struct GradientPenalty {
    pub gp: Var,
    pub mean_grad_norm: f64,
}

/// `E[(‖∇_x̃ c(x̃)‖₂ − 1)²]` over per-sample interpolates `x̃ = ε·real +
/// (1−ε)·fake`, ε drawn once per batch element. `input_grad` must build the
/// critic's per-sample input gradient as a differentiable graph.
pub fn gradient_penalty<E: Elem>(
    tape: &Tape<E>,
    real: &ArrayD<E>,
    fake: &ArrayD<E>,
    input_grad: impl Fn(&Tape<E>, Var) -> Var,
    rng: &mut ChaCha8Rng,
) -> Result<GradientPenalty> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "gradient penalty: real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let b = *real
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidInput("gradient penalty on scalar input".into()))?;
    if b == 0 {
        return Err(Error::InvalidInput("gradient penalty on an empty batch".into()));
    }

    let mut interp = ArrayD::<E>::zeros(real.raw_dim());
    let per = real.len() / b;
    let real_s = real.as_slice().expect("contiguous");
    let fake_s = fake.as_slice().expect("contiguous");
    {
        let out = interp.as_slice_mut().expect("contiguous");
        for bi in 0..b {
            let eps = E::from_f64(rng.random_range(0.0..=1.0));
            let one_m = E::one() - eps;
            for i in bi * per..(bi + 1) * per {
                out[i] = eps * real_s[i] + one_m * fake_s[i];
            }
        }
    }

    let x_tilde = tape.constant(interp);
    let grad = input_grad(tape, x_tilde);
    let norm = tape.sqrt(tape.sum_per_sample(tape.sqr(grad))); // [B]
    let norm_vals = tape.value(norm);
    let mean_grad_norm =
        norm_vals.iter().map(|&v| v.to_f64()).sum::<f64>() / b as f64;
    let centered = tape.affine(norm, E::one(), E::from_f64(-1.0));
    let gp = tape.mean_all(tape.sqr(centered));
    Ok(GradientPenalty { gp, mean_grad_norm })
}

/// The critic objective plus its diagnostic parts.
pub struct CriticLoss {
    pub loss: Var,
    pub gp: f64,
    pub mean_grad_norm: f64,
    /// `E[c(real)] − E[c(fake)]`, the Wasserstein gap estimate.
    pub gap: f64,
}

/// `E[c(fake)] − E[c(real)] + λ·GP`, the quantity the critic minimizes. Both
/// maps enter as constants; only critic parameters receive gradients.
pub fn critic_loss<E: Elem>(
    tape: &Tape<E>,
    real: &ArrayD<E>,
    fake: &ArrayD<E>,
    score: impl Fn(&Tape<E>, Var) -> Var,
    input_grad: impl Fn(&Tape<E>, Var) -> Var,
    lambda_gp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CriticLoss> {
    let s_real = tape.mean_all(score(tape, tape.constant(real.clone())));
    let s_fake = tape.mean_all(score(tape, tape.constant(fake.clone())));
    let gap = tape.scalar_value(s_real).to_f64() - tape.scalar_value(s_fake).to_f64();
    let pen = gradient_penalty(tape, real, fake, input_grad, rng)?;
    let diff = tape.sub(s_fake, s_real);
    let weighted = tape.affine(pen.gp, E::from_f64(lambda_gp), E::zero());
    let loss = tape_finite(tape, tape.add(diff, weighted), "critic loss")?;
    Ok(CriticLoss {
        loss,
        gp: tape.scalar_value(pen.gp).to_f64(),
        mean_grad_norm: pen.mean_grad_norm,
        gap,
    })
}

/// `−E[c(fake)]`; `fake` stays differentiable back to the generator, the
/// critic's parameters must already be injected as constants.
pub fn generator_adversarial_loss<E: Elem>(
    tape: &Tape<E>,
    fake: Var,
    score: impl Fn(&Tape<E>, Var) -> Var,
) -> Result<Var> {
    if tape.shape(fake).first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidInput(
            "adversarial loss on an empty batch".into(),
        ));
    }
    let s = tape.mean_all(score(tape, fake));
    tape_finite(tape, tape.neg(s), "generator adversarial loss")
}

/// `alpha_mix·l_depth + (1−alpha_mix)·l_seg + beta_adv·l_gen_adv`, exactly.
pub fn total_loss(l_depth: f64, l_seg: f64, l_gen_adv: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_depth", l_depth), ("l_seg", l_seg), ("l_gen_adv", l_gen_adv)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v} in total loss")));
        }
    }
    Ok(weights.alpha_mix * l_depth + (1.0 - weights.alpha_mix) * l_seg + weights.beta_adv * l_gen_adv)
}

/// Tape-side counterpart of [`total_loss`] for the generator's backward pass.
pub fn total_loss_var<E: Elem>(
    tape: &Tape<E>,
    l_depth: Var,
    l_seg: Var,
    l_gen_adv: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let d = tape.affine(l_depth, E::from_f64(weights.alpha_mix), E::zero());
    let s = tape.affine(l_seg, E::from_f64(1.0 - weights.alpha_mix), E::zero());
    let a = tape.affine(l_gen_adv, E::from_f64(weights.beta_adv), E::zero());
    tape_finite(tape, tape.add(tape.add(d, s), a), "total loss")
}

fn tape_finite<E: Elem>(tape: &Tape<E>, v: Var, what: &str) -> Result<Var> {
    let val = tape.scalar_value(v).to_f64();
    if !val.is_finite() {
        return Err(Error::NonFinite(format!("{what} = {val}")));
    }
    Ok(v)
}
