//! The generator (shared windowed-attention encoder, shared upsampling
//! decoder, two task heads) and the Wasserstein critic.

mod critic;
mod decoder;
mod joint;
pub mod params;
mod swin;

pub use critic::Critic;
pub use joint::{joint_map_from_ground_truth, joint_map_from_predictions, JointMapData};
pub use params::{Injected, ParamStore, PId};

use std::collections::HashMap;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tape, Var};
use crate::{Error, Result};

use decoder::{DecoderStage, PatchExpand, PixelHead};
use swin::{LayerNorm, Linear, PatchMerge, SwinBlock};

/// Architecture hyperparameters of the generator and critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    /// Transformer blocks per encoder stage.
    pub depths: Vec<usize>,
    /// Attention heads per encoder stage.
    pub heads: Vec<usize>,
    /// Feature width of the full-resolution decoder output.
    pub decoder_channels: usize,
    pub mlp_ratio: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Base channel count of the critic's first convolution.
    pub critic_base_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            patch_size: 4,
            window_size: 4,
            embed_dim: 48,
            depths: vec![2, 2, 2],
            heads: vec![3, 6, 12],
            decoder_channels: 32,
            mlp_ratio: 2.0,
            image_height: 64,
            image_width: 64,
            critic_base_channels: 16,
        }
    }
}

impl NetConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width of stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token grid of stage `s`.
    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        (
            self.image_height / self.patch_size / (1 << s),
            self.image_width / self.patch_size / (1 << s),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("depths must list at least one stage".into()));
        }
        if self.depths.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "depths ({}) and heads ({}) must have the same number of stages",
                self.depths.len(),
                self.heads.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let div = self.patch_size << (self.stages() - 1);
        for (axis, size) in [("height", self.image_height), ("width", self.image_width)] {
            if size == 0 || size % div != 0 {
                return Err(Error::Config(format!(
                    "image {axis} {size} must be divisible by patch_size * 2^(stages-1) = {div}"
                )));
            }
        }
        for s in 0..self.stages() {
            let dim = self.stage_dim(s);
            if dim % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {s} dim {dim} not divisible by heads {}",
                    self.heads[s]
                )));
            }
            let (gh, gw) = self.stage_grid(s);
            let win = self.effective_window(s);
            if gh % win != 0 || gw % win != 0 {
                return Err(Error::Config(format!(
                    "stage {s} token grid {gh}x{gw} not divisible by window size {win}"
                )));
            }
        }
        Ok(())
    }

    /// Window size clipped to the stage's token grid (with shift disabled at
    /// single-window stages, mirroring the reference shifted-window scheme).
    pub fn effective_window(&self, s: usize) -> usize {
        let (gh, gw) = self.stage_grid(s);
        self.window_size.min(gh).min(gw)
    }
}

/// Which task heads a generator carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSelection {
    DepthOnly,
    SegOnly,
    Both,
}

/// Generator outputs.
pub struct Predictions {
    /// `[B, 1, H, W]`, sigmoid-bounded normalized depth.
    pub log_depth: Var,
    /// `[B, K, H, W]` unbounded logits; absent for depth-only builds.
    pub seg_logits: Option<Var>,
}

struct EncoderStage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerge>,
}

/// The shared encoder/decoder generator with task-specific heads.
pub struct MultiTaskNet {
    cfg: NetConfig,
    tasks: TaskSelection,
    patch_embed: Linear,
    embed_norm: LayerNorm,
    stages: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    final_expand: PatchExpand,
    depth_head: Option<PixelHead>,
    seg_head: Option<PixelHead>,
}

impl MultiTaskNet {
    /// Builds the network, registering parameters into `store`. Optionally
    /// applies `external_weights` (parameter name -> array) afterwards, the
    /// loading hook for externally pretrained encoders.
    pub fn build<E: Elem>(
        cfg: &NetConfig,
        tasks: TaskSelection,
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        external_weights: Option<&HashMap<String, ArrayD<E>>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let patch_dim = cfg.in_channels * p * p;
        let patch_embed = Linear::new(store, rng, "gen.patch_embed", patch_dim, cfg.embed_dim, true);
        let embed_norm = LayerNorm::new(store, "gen.embed_norm", cfg.embed_dim);

        let mut stages = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let dim = cfg.stage_dim(s);
            let win = cfg.effective_window(s);
            let (gh, gw) = cfg.stage_grid(s);
            let single_window = win >= gh && win >= gw;
            let mut blocks = Vec::with_capacity(cfg.depths[s]);
            for bidx in 0..cfg.depths[s] {
                // consecutive blocks alternate unshifted / shifted windows
                let shift = if bidx % 2 == 1 && !single_window { win / 2 } else { 0 };
                blocks.push(SwinBlock::new(
                    store,
                    rng,
                    &format!("gen.stage{s}.block{bidx}"),
                    dim,
                    cfg.heads[s],
                    win,
                    shift,
                    cfg.mlp_ratio,
                ));
            }
            let merge = (s + 1 < cfg.stages())
                .then(|| PatchMerge::new(store, rng, &format!("gen.stage{s}.merge"), dim));
            stages.push(EncoderStage { blocks, merge });
        }

        let mut decoder = Vec::new();
        for s in (1..cfg.stages()).rev() {
            decoder.push(DecoderStage::new(
                store,
                rng,
                &format!("gen.decoder{}", cfg.stages() - 1 - s),
                cfg.stage_dim(s),
                cfg.stage_dim(s - 1),
            ));
        }
        let final_expand = PatchExpand::new(
            store,
            rng,
            "gen.final_expand",
            cfg.embed_dim,
            cfg.decoder_channels,
            p,
        );
        let hidden = cfg.decoder_channels;
        let depth_head = matches!(tasks, TaskSelection::DepthOnly | TaskSelection::Both).then(|| {
            PixelHead::new(store, rng, "gen.depth_head", cfg.decoder_channels, hidden, 1)
        });
        let seg_head = matches!(tasks, TaskSelection::SegOnly | TaskSelection::Both).then(|| {
            PixelHead::new(
                store,
                rng,
                "gen.seg_head",
                cfg.decoder_channels,
                hidden,
                cfg.num_classes,
            )
        });

        let net = Self {
            cfg: cfg.clone(),
            tasks,
            patch_embed,
            embed_norm,
            stages,
            decoder,
            final_expand,
            depth_head,
            seg_head,
        };
        if let Some(map) = external_weights {
            store.load_named(map)?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn tasks(&self) -> TaskSelection {
        self.tasks
    }

    /// `images: [B, 3, H, W]` (already normalized) -> per-task maps.
    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, images: Var) -> Result<Predictions> {
        let shape = tape.shape(images);
        if shape.len() != 4
            || shape[1] != self.cfg.in_channels
            || shape[2] != self.cfg.image_height
            || shape[3] != self.cfg.image_width
        {
            return Err(Error::Shape(format!(
                "forward expects [B, {}, {}, {}], got {:?}",
                self.cfg.in_channels, self.cfg.image_height, self.cfg.image_width, shape
            )));
        }
        let b = shape[0];
        let (h, w, p) = (self.cfg.image_height, self.cfg.image_width, self.cfg.patch_size);
        let (gh, gw) = (h / p, w / p);
        let cin = self.cfg.in_channels;

        // patch embedding: NCHW -> [B, gh, gw, C*p*p] -> embed_dim
        let x = tape.reshape(images, &[b, cin, gh, p, gw, p]);
        let x = tape.permute(x, &[0, 2, 4, 3, 5, 1]);
        let x = tape.reshape(x, &[b, gh, gw, p * p * cin]);
        let x = self.patch_embed.forward(tape, ps, x);
        let mut x = self.embed_norm.forward(tape, ps, x);

        let mut skips = Vec::with_capacity(self.cfg.stages());
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(tape, ps, x);
            }
            skips.push(x);
            if let Some(merge) = &stage.merge {
                x = merge.forward(tape, ps, x);
            }
        }

        let mut cur = *skips.last().expect("at least one stage");
        for (i, stage) in self.decoder.iter().enumerate() {
            let skip = skips[self.cfg.stages() - 2 - i];
            cur = stage.forward(tape, ps, cur, skip);
        }
        let feats = self.final_expand.forward(tape, ps, cur); // [B, H, W, F]
        let feats = tape.gelu(feats);

        let log_depth = match &self.depth_head {
            Some(head) => {
                let raw = head.forward(tape, ps, feats); // [B, 1, H, W]
                tape.sigmoid(raw)
            }
            None => {
                // segmentation-only build still reports a flat depth plane so
                // downstream shapes stay uniform; it carries no gradient.
                let half = ndarray::ArrayD::from_elem(
                    ndarray::IxDyn(&[b, 1, h, w]),
                    E::from_f64(0.5),
                );
                tape.constant(half)
            }
        };
        let seg_logits = self
            .seg_head
            .as_ref()
            .map(|head| head.forward(tape, ps, feats));
        Ok(Predictions { log_depth, seg_logits })
    }
}

/// How many critics score the generator, and what each one sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticMode {
    /// No adversarial term at all.
    None,
    /// A single critic over the joint map `[B, 1+K, H, W]`.
    One,
    /// Separate depth and segmentation critics, each seeing its own map
    /// concatenated with the RGB image (`1+3` and `K+3` channels).
    Two,
}

/// Builds the critic(s) for `mode`, registering parameters into `store`.
pub fn build_critics<E: Elem>(
    cfg: &NetConfig,
    mode: CriticMode,
    store: &mut ParamStore<E>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Critic>> {
    cfg.validate()?;
    let base = cfg.critic_base_channels;
    Ok(match mode {
        CriticMode::None => Vec::new(),
        CriticMode::One => vec![Critic::build(
            store,
            rng,
            "critic.joint",
            1 + cfg.num_classes,
            base,
        )],
        CriticMode::Two => vec![
            Critic::build(store, rng, "critic.depth", 1 + cfg.in_channels, base),
            Critic::build(
                store,
                rng,
                "critic.seg",
                cfg.num_classes + cfg.in_channels,
                base,
            ),
        ],
    })
}

/// Exact count of trainable scalars in a store.
pub fn count_params<E: Elem>(store: &ParamStore<E>) -> usize {
    store.count_scalars()
}
