//! Upsampling decoder with encoder skip connections and the two task heads.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{ConvSpec, Elem, Tape, Var};

use super::params::{trunc_normal, zeros, Injected, ParamStore, PId};
use super::swin::Linear;

pub(crate) struct Conv2d {
    pub w: PId,
    pub b: PId,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
    ) -> Self {
        let fan_in = cin * spec.kernel * spec.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            w: store.add(
                format!("{name}.weight"),
                trunc_normal(rng, &[cout, cin, spec.kernel, spec.kernel], std),
            ),
            b: store.add(format!("{name}.bias"), zeros(&[cout])),
            spec,
        }
    }

    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        tape.conv2d(x, ps.var(self.w), Some(ps.var(self.b)), self.spec)
    }
}

/// Doubles spatial resolution of `[B, H, W, C]` tokens: linear `C -> 2*2*Cout`
/// followed by pixel shuffle.
pub(crate) struct PatchExpand {
    cin: usize,
    cout: usize,
    factor: usize,
    expand: Linear,
}

impl PatchExpand {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
    ) -> Self {
        Self {
            cin,
            cout,
            factor,
            expand: Linear::new(store, rng, name, cin, factor * factor * cout, true),
        }
    }

    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let shape = tape.shape(x);
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(shape[3], self.cin);
        let f = self.factor;
        let x = self.expand.forward(tape, ps, x); // [B, H, W, f*f*Cout]
        let x = tape.reshape(x, &[b, h, w, f, f, self.cout]);
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5]);
        tape.reshape(x, &[b, h * f, w * f, self.cout])
    }
}

/// Per-pixel two-layer MLP head over `[B, H, W, F]` features.
pub(crate) struct PixelHead {
    fc1: Linear,
    fc2: Linear,
}

impl PixelHead {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), cin, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, cout, true),
        }
    }

    /// Returns NCHW output.
    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let y = self.fc1.forward(tape, ps, x);
        let y = tape.gelu(y);
        let y = self.fc2.forward(tape, ps, y);
        tape.permute(y, &[0, 3, 1, 2])
    }
}

/// Decoder stage: upsample, concatenate the skip, fuse with a 3x3 conv.
pub(crate) struct DecoderStage {
    expand: PatchExpand,
    fuse: Conv2d,
}

impl DecoderStage {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            expand: PatchExpand::new(store, rng, &format!("{name}.expand"), cin, cout, 2),
            fuse: Conv2d::new(
                store,
                rng,
                &format!("{name}.fuse"),
                2 * cout,
                cout,
                ConvSpec { kernel: 3, stride: 1, pad: 1 },
            ),
        }
    }

    /// `x: [B, H, W, Cin]`, `skip: [B, 2H, 2W, Cout]` -> `[B, 2H, 2W, Cout]`.
    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var, skip: Var) -> Var {
        let up = self.expand.forward(tape, ps, x);
        let cat = tape.concat(&[up, skip], 3);
        let nchw = tape.permute(cat, &[0, 3, 1, 2]);
        let fused = self.fuse.forward(tape, ps, nchw);
        let fused = tape.gelu(fused);
        tape.permute(fused, &[0, 2, 3, 1])
    }
}
