//! Joint depth + segmentation maps, the critic's input: channel 0 carries
//! normalized log depth in [0,1], channels 1..K carry per-class probabilities.

use ndarray::{ArrayD, Ix3, IxDyn};

use crate::tensor::{Elem, Tape, Var};
use crate::{Error, Result};

/// A ground-truth joint map plus the record of which pixels were ignored.
pub struct JointMapData<E: Elem> {
    /// `[B, 1+K, H, W]`.
    pub map: ArrayD<E>,
    /// `[B, H, W]`, true where the label equals the ignore id (those pixels
    /// carry the all-zeros vector on the segmentation channels).
    pub ignore_mask: ArrayD<bool>,
}

/// Differentiable path: softmax over the class axis of `seg_logits`
/// (`[B, K, H, W]`), concatenated after `log_depth` (`[B, 1, H, W]`).
pub fn joint_map_from_predictions<E: Elem>(
    tape: &Tape<E>,
    log_depth: Var,
    seg_logits: Var,
) -> Result<Var> {
    let ds = tape.shape(log_depth);
    let ss = tape.shape(seg_logits);
    if ds.len() != 4 || ss.len() != 4 || ds[1] != 1 {
        return Err(Error::Shape(format!(
            "joint map expects depth [B,1,H,W] and logits [B,K,H,W], got {ds:?} and {ss:?}"
        )));
    }
    if ds[0] != ss[0] || ds[2] != ss[2] || ds[3] != ss[3] {
        return Err(Error::Shape(format!(
            "depth {ds:?} and logits {ss:?} disagree on batch or spatial size"
        )));
    }
    let nhwk = tape.permute(seg_logits, &[0, 2, 3, 1]);
    let probs = tape.softmax_last(nhwk);
    let probs = tape.permute(probs, &[0, 3, 1, 2]);
    Ok(tape.concat(&[log_depth, probs], 1))
}

/// Ground-truth path: one-hot encodes integer labels (`[B, H, W]`, stored as
/// reals), with `ignore_id` pixels mapped to all zeros.
pub fn joint_map_from_ground_truth<E: Elem>(
    log_depth: &ArrayD<E>,
    labels: &ArrayD<f64>,
    num_classes: usize,
    ignore_id: u32,
) -> Result<JointMapData<E>> {
    let ds = log_depth.shape();
    let ls = labels.shape();
    if ds.len() != 4 || ds[1] != 1 || ls.len() != 3 {
        return Err(Error::Shape(format!(
            "joint map expects depth [B,1,H,W] and labels [B,H,W], got {ds:?} and {ls:?}"
        )));
    }
    if ds[0] != ls[0] || ds[2] != ls[1] || ds[3] != ls[2] {
        return Err(Error::Shape(format!(
            "depth {ds:?} and labels {ls:?} disagree on batch or spatial size"
        )));
    }
    let (b, h, w) = (ls[0], ls[1], ls[2]);
    let k = num_classes;
    let labels = labels.view().into_dimensionality::<Ix3>().expect("checked rank");
    let mut map = ArrayD::<E>::zeros(IxDyn(&[b, 1 + k, h, w]));
    let mut ignore = ArrayD::from_elem(IxDyn(&[b, h, w]), false);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                map[IxDyn(&[bi, 0, i, j])] = log_depth[IxDyn(&[bi, 0, i, j])];
                let raw = labels[(bi, i, j)];
                if !raw.is_finite() || raw.fract() != 0.0 || raw < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "label at ({bi}, {i}, {j}) is not a non-negative integer: {raw}"
                    )));
                }
                let id = raw as u32;
                if id == ignore_id {
                    ignore[IxDyn(&[bi, i, j])] = true;
                } else if (id as usize) < k {
                    map[IxDyn(&[bi, 1 + id as usize, i, j])] = E::one();
                } else {
                    return Err(Error::InvalidInput(format!(
                        "label {id} at ({bi}, {i}, {j}) outside 0..{k} and not the ignore id {ignore_id}"
                    )));
                }
            }
        }
    }
    Ok(JointMapData { map, ignore_mask: ignore })
}
