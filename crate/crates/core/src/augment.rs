//! Training-time augmentation: photometric jitter, horizontal flip, and
//! batch-level patch shuffling, all applied consistently to image, depth,
//! label, and validity maps.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::{Error, Result};

/// Augmentation parameters. Ranges are half-widths around the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    /// Square patches cut per image.
    pub n_patches: usize,
    /// Smallest patch side, as a fraction of image height.
    pub min_frac: f64,
    /// Largest patch side, as a fraction of image height.
    pub max_frac: f64,
    /// Additive brightness delta drawn from `[-x, x]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1-x, 1+x]`, applied about the image mean.
    pub contrast: f64,
    /// Gamma exponent drawn from `[1-x, 1+x]`.
    pub gamma: f64,
    /// Hue rotation drawn from `[-x, x]`, as a fraction of the full circle.
    pub hue: f64,
    /// Saturation factor drawn from `[1-x, 1+x]`.
    pub saturation: f64,
    pub flip_prob: f64,
    pub mixup_prob: f64,
    /// Exchange patches across the batch; when false, patches only move
    /// within their own image.
    pub cross_image: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            n_patches: 4,
            min_frac: 1.0 / 8.0,
            max_frac: 0.5,
            // photometric jitter is kept gentle: image intensity is a direct
            // depth cue, so aggressive jitter acts as label noise on depth
            brightness: 0.005,
            contrast: 0.01,
            gamma: 0.01,
            hue: 0.01,
            saturation: 0.03,
            flip_prob: 0.5,
            mixup_prob: 0.5,
            cross_image: true,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_frac > 0.0 && self.min_frac <= self.max_frac && self.max_frac <= 1.0) {
            return Err(Error::Config(format!(
                "patch fractions must satisfy 0 < min ({}) <= max ({}) <= 1",
                self.min_frac, self.max_frac
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("mixup_prob", self.mixup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("gamma", self.gamma),
            ("hue", self.hue),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} range must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Photometric jitter on the image only: brightness, contrast about the mean,
/// gamma, and a hue/saturation shift. Output stays in [0,1].
pub fn photometric(image: &Array3<f64>, rng: &mut ChaCha8Rng, cfg: &AugConfig) -> Array3<f64> {
    let brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
    let contrast = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
    let gamma = rng.random_range(1.0 - cfg.gamma..=1.0 + cfg.gamma);
    let hue = rng.random_range(-cfg.hue..=cfg.hue);
    let saturation = rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation);

    let mean = image.iter().sum::<f64>() / image.len() as f64;
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    for i in 0..h {
        for j in 0..w {
            let mut px = [0.0; 3];
            for c in 0..3 {
                let mut v = out[(i, j, c)];
                v += brightness;
                v = (v - mean) * contrast + mean;
                v = v.clamp(0.0, 1.0).powf(gamma);
                px[c] = v;
            }
            let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(hh + hue, (ss * saturation).clamp(0.0, 1.0), vv);
            out[(i, j, 0)] = r.clamp(0.0, 1.0);
            out[(i, j, 1)] = g.clamp(0.0, 1.0);
            out[(i, j, 2)] = b.clamp(0.0, 1.0);
        }
    }
    out
}

/// Mirrors every map of the sample about the vertical axis with probability
/// `p`.
pub fn hflip(sample: &Sample, rng: &mut ChaCha8Rng, p: f64) -> Sample {
    if rng.random_range(0.0..1.0) >= p {
        return sample.clone();
    }
    flip_sample(sample)
}

fn flip_sample(sample: &Sample) -> Sample {
    let (h, w) = sample.depth.shape();
    let mut out = sample.clone();
    for i in 0..h {
        for j in 0..w {
            let m = w - 1 - j;
            for c in 0..3 {
                out.image[(i, j, c)] = sample.image[(i, m, c)];
            }
            out.depth.values[(i, j)] = sample.depth.values[(i, m)];
            out.depth.valid[(i, j)] = sample.depth.valid[(i, m)];
            out.labels[(i, j)] = sample.labels[(i, m)];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct PatchSlot {
    sample: usize,
    y: usize,
    x: usize,
    side: usize,
}

/// Cuts `n_patches` square patches per image and shuffles them across the
/// batch (or within each image when `cross_image` is false). Image, depth,
/// labels, and validity move together, so every pixel keeps its supervision.
/// Patch sides are multiples of the minimum side, and shuffling happens among
/// equal-sided patches only, so every paste is size-exact. Contents are read
/// from the pre-shuffle batch; overlapping pastes resolve in selection order.
pub fn patch_mixup(batch: &[Sample], rng: &mut ChaCha8Rng, cfg: &AugConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if batch.is_empty() || cfg.n_patches == 0 {
        return Ok(batch.to_vec());
    }
    let (h, w) = batch[0].depth.shape();
    for s in batch {
        if s.depth.shape() != (h, w) {
            return Err(Error::Shape("patch_mixup: batch samples differ in size".into()));
        }
    }
    let unit = ((cfg.min_frac * h as f64).round() as usize).max(1);
    let max_side = (cfg.max_frac * h as f64).floor() as usize;
    if unit > h.min(w) || unit > max_side {
        return Err(Error::Config(format!(
            "patch sides {unit}..{max_side} do not fit a {h}x{w} image"
        )));
    }
    let max_k = (max_side / unit).min(h.min(w) / unit);
    if max_k == 0 {
        return Err(Error::Config(format!(
            "largest patch side {max_side} is below the minimum side {unit}"
        )));
    }

    // draw all slots in deterministic order
    let mut slots: Vec<PatchSlot> = Vec::with_capacity(batch.len() * cfg.n_patches);
    for sample in 0..batch.len() {
        for _ in 0..cfg.n_patches {
            let side = unit * rng.random_range(1..=max_k);
            let y = rng.random_range(0..=h - side);
            let x = rng.random_range(0..=w - side);
            slots.push(PatchSlot { sample, y, x, side });
        }
    }

    // permute sources within equal-side buckets (and equal sample, when not
    // crossing images)
    let mut source_of: Vec<usize> = (0..slots.len()).collect();
    let bucket_key = |slot: &PatchSlot| {
        if cfg.cross_image {
            slot.side
        } else {
            slot.sample * (h + 1) + slot.side
        }
    };
    let mut keys: Vec<usize> = slots.iter().map(bucket_key).collect();
    keys.sort_unstable();
    keys.dedup();
    for key in keys {
        let mut members: Vec<usize> =
            (0..slots.len()).filter(|&i| bucket_key(&slots[i]) == key).collect();
        members.shuffle(rng);
        let mut sorted = members.clone();
        sorted.sort_unstable();
        for (dst, src) in sorted.into_iter().zip(members) {
            source_of[dst] = src;
        }
    }

    let mut out = batch.to_vec();
    for (dst_idx, dst) in slots.iter().enumerate() {
        let src = slots[source_of[dst_idx]];
        debug_assert_eq!(src.side, dst.side);
        let from = &batch[src.sample];
        let to = &mut out[dst.sample];
        for di in 0..dst.side {
            for dj in 0..dst.side {
                let (si, sj) = (src.y + di, src.x + dj);
                let (ti, tj) = (dst.y + di, dst.x + dj);
                for c in 0..3 {
                    to.image[(ti, tj, c)] = from.image[(si, sj, c)];
                }
                to.depth.values[(ti, tj)] = from.depth.values[(si, sj)];
                to.depth.valid[(ti, tj)] = from.depth.valid[(si, sj)];
                to.labels[(ti, tj)] = from.labels[(si, sj)];
            }
        }
    }
    Ok(out)
}

/// The full train-time pipeline: photometric jitter per sample, horizontal
/// flip per sample, then patch shuffling with probability `mixup_prob`.
pub fn augment_batch(batch: &[Sample], rng: &mut ChaCha8Rng, cfg: &AugConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut out: Vec<Sample> = batch
        .iter()
        .map(|s| {
            let jittered = photometric(&s.image, rng, cfg);
            let mut s2 = s.clone();
            s2.image = jittered;
            hflip(&s2, rng, cfg.flip_prob)
        })
        .collect();
    if cfg.n_patches > 0 && rng.random_range(0.0..1.0) < cfg.mixup_prob {
        out = patch_mixup(&out, rng, cfg)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
