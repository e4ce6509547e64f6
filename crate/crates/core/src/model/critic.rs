//! The Wasserstein critic: a strided convolutional scorer over joint maps.
//!
//! No normalization layer couples batch elements, so per-sample input
//! gradients (needed by the gradient penalty) are well defined. The critic
//! exposes its own input-gradient graph built from differentiable ops, which
//! makes the penalty trainable with a single reverse pass.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Elem, Tape, Var};

use super::decoder::Conv2d;
use super::params::{trunc_normal, zeros, Injected, ParamStore, PId};

const LEAK: f64 = 0.2;
const STAGES: usize = 4;

pub struct Critic {
    convs: Vec<Conv2d>,
    fc_w: PId,
    fc_b: PId,
    in_channels: usize,
    channels: Vec<usize>,
}

impl Critic {
    /// `base_channels` doubles at each of the four stride-2 stages.
    pub fn build<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        base_channels: usize,
    ) -> Self {
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let mut convs = Vec::with_capacity(STAGES);
        let mut channels = Vec::with_capacity(STAGES);
        let mut cin = in_channels;
        let mut cout = base_channels;
        for s in 0..STAGES {
            convs.push(Conv2d::new(store, rng, &format!("{name}.conv{s}"), cin, cout, spec));
            channels.push(cout);
            cin = cout;
            cout *= 2;
        }
        let last = channels[STAGES - 1];
        // a deliberately small output layer keeps the freshly initialized
        // critic's input-gradient norm near 1, where the gradient penalty
        // wants it
        let fc_w = store.add(
            format!("{name}.fc.weight"),
            trunc_normal(rng, &[last, 1], 0.01),
        );
        let fc_b = store.add(format!("{name}.fc.bias"), zeros(&[1]));
        Self {
            convs,
            fc_w,
            fc_b,
            in_channels,
            channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Scores `x: [B, C, H, W]`, returning `[B, 1]` of unbounded reals.
    pub fn score<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.forward(tape, ps, cur);
            cur = tape.leaky_relu(cur, E::from_f64(LEAK));
        }
        let pooled = tape.mean_spatial(cur); // [B, C_last]
        tape.linear(pooled, ps.var(self.fc_w), Some(ps.var(self.fc_b)))
    }

    /// Builds the per-sample gradient of the score with respect to the input,
    /// as a differentiable graph: `[B, C, H, W]`.
    ///
    /// The forward pass is replayed to obtain pre-activation signs; those
    /// enter the graph as constants (the rectifier's second derivative is zero
    /// almost everywhere), while convolution weights stay differentiable.
    pub fn input_gradient<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let shape = tape.shape(x);
        let (b, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);

        // forward, remembering pre-activation values and spatial sizes
        let mut sizes = vec![(h, w)];
        let mut pre_acts = Vec::with_capacity(STAGES);
        let mut cur = x;
        for conv in &self.convs {
            let pre = conv.forward(tape, ps, cur);
            pre_acts.push(tape.value(pre));
            cur = tape.leaky_relu(pre, E::from_f64(LEAK));
            let s = tape.shape(cur);
            sizes.push((s[2], s[3]));
        }

        // adjoint seed: d score / d pooled = fc weight, spread over the pool
        let (lh, lw) = sizes[STAGES];
        let last_c = self.channels[STAGES - 1];
        let wv = ps.var(self.fc_w); // [C_last, 1]
        let wflat = tape.reshape(wv, &[last_c]);
        let inv_pool = E::from_f64(1.0 / (lh * lw) as f64);
        let wflat = tape.affine(wflat, inv_pool, E::zero());
        let mut grad = tape.broadcast_chan_nchw(wflat, b, lh, lw);
        for s in (0..STAGES).rev() {
            // through the leaky rectifier: multiply by the activation slope
            let slope_mask = pre_acts[s].mapv(|v| {
                if v > E::zero() {
                    E::one()
                } else {
                    E::from_f64(LEAK)
                }
            });
            grad = tape.mul_const(grad, slope_mask.to_owned());
            // through the convolution: transposed conv with the same weights
            let (ph, pw) = sizes[s];
            grad = tape.conv2d_transpose(grad, ps.var(self.convs[s].w), spec, ph, pw);
        }
        grad
    }
}
