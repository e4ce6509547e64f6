//! Windowed multi-head self-attention encoder with alternating shifted
//! windows and patch-merging downsampling.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Tape, Var};

use super::params::{ones, trunc_normal, zeros, Injected, ParamStore, PId};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub(crate) struct Linear {
    pub w: PId,
    pub b: Option<PId>,
}

impl Linear {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, &[cin, cout], INIT_STD));
        let b = bias.then(|| store.add(format!("{name}.bias"), zeros(&[cout])));
        Self { w, b }
    }

    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        tape.linear(x, ps.var(self.w), self.b.map(|b| ps.var(b)))
    }
}

pub(crate) struct LayerNorm {
    pub gamma: PId,
    pub beta: PId,
}

impl LayerNorm {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ones(&[c])),
            beta: store.add(format!("{name}.beta"), zeros(&[c])),
        }
    }

    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        tape.layer_norm(x, ps.var(self.gamma), ps.var(self.beta), E::from_f64(LN_EPS))
    }
}

/// One window-attention transformer block.
pub(crate) struct SwinBlock {
    dim: usize,
    heads: usize,
    window: usize,
    shift: usize,
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Self {
            dim,
            heads,
            window,
            shift,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            q: Linear::new(store, rng, &format!("{name}.attn.q"), dim, dim, true),
            k: Linear::new(store, rng, &format!("{name}.attn.k"), dim, dim, true),
            v: Linear::new(store, rng, &format!("{name}.attn.v"), dim, dim, true),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp_in: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, hidden, true),
            mlp_out: Linear::new(store, rng, &format!("{name}.mlp.fc2"), hidden, dim, true),
        }
    }

    /// `x: [B, H, W, C] -> [B, H, W, C]`.
    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let shape = tape.shape(x);
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let c = self.dim;
        let win = self.window;
        let t = win * win;
        let (nh, nw) = (h / win, w / win);
        let windows = nh * nw;
        let heads = self.heads;
        let hd = c / heads;

        let shortcut = x;
        let mut cur = self.norm1.forward(tape, ps, x);
        if self.shift > 0 {
            cur = tape.roll_hw(cur, -(self.shift as isize), -(self.shift as isize));
        }
        // window partition: [B, H, W, C] -> [B*windows, T, C]
        cur = tape.reshape(cur, &[b, nh, win, nw, win, c]);
        cur = tape.permute(cur, &[0, 1, 3, 2, 4, 5]);
        cur = tape.reshape(cur, &[b * windows, t, c]);

        let to_heads = |v: Var| {
            let v = tape.reshape(v, &[b * windows, t, heads, hd]);
            let v = tape.permute(v, &[0, 2, 1, 3]);
            tape.reshape(v, &[b * windows * heads, t, hd])
        };
        let q = to_heads(self.q.forward(tape, ps, cur));
        let k = to_heads(self.k.forward(tape, ps, cur));
        let v = to_heads(self.v.forward(tape, ps, cur));

        let scale = E::from_f64(1.0 / (hd as f64).sqrt());
        let q = tape.affine(q, scale, E::zero());
        let mut attn = tape.batch_matmul_nt(q, k); // [B*windows*heads, T, T]
        if self.shift > 0 {
            let mask = shifted_window_mask::<E>(h, w, win, self.shift);
            attn = tape.add_const(attn, expand_mask(&mask, b, heads));
        }
        let attn = tape.softmax_last(attn);
        let out = tape.batch_matmul(attn, v); // [B*windows*heads, T, hd]
        let out = tape.reshape(out, &[b * windows, heads, t, hd]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[b * windows, t, c]);
        let out = self.proj.forward(tape, ps, out);

        // window reverse
        let out = tape.reshape(out, &[b, nh, nw, win, win, c]);
        let out = tape.permute(out, &[0, 1, 3, 2, 4, 5]);
        let mut out = tape.reshape(out, &[b, h, w, c]);
        if self.shift > 0 {
            out = tape.roll_hw(out, self.shift as isize, self.shift as isize);
        }
        let x = tape.add(shortcut, out);

        let shortcut = x;
        let y = self.norm2.forward(tape, ps, x);
        let y = self.mlp_in.forward(tape, ps, y);
        let y = tape.gelu(y);
        let y = self.mlp_out.forward(tape, ps, y);
        tape.add(shortcut, y)
    }
}

/// Attention bias for shifted windows: 0 within a contiguous region,
/// a large negative number across regions that only became neighbors through
/// the cyclic shift. Shape `[windows, T, T]`.
pub(crate) fn shifted_window_mask<E: Elem>(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
) -> ArrayD<E> {
    let mut region = ndarray::Array2::<i32>::zeros((h, w));
    let mut counter = 0i32;
    let h_bounds = [0, h - window, h - shift, h];
    let w_bounds = [0, w - window, w - shift, w];
    for hi in 0..3 {
        for wi in 0..3 {
            for i in h_bounds[hi]..h_bounds[hi + 1] {
                for j in w_bounds[wi]..w_bounds[wi + 1] {
                    region[(i, j)] = counter;
                }
            }
            counter += 1;
        }
    }
    // cyclic shift, then partition into windows
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut mask = ArrayD::<E>::zeros(IxDyn(&[nh * nw, t, t]));
    let neg = E::from_f64(-100.0);
    for wh in 0..nh {
        for ww in 0..nw {
            let widx = wh * nw + ww;
            let region_of = |ti: usize| {
                let (ri, rj) = (ti / window, ti % window);
                let gi = (wh * window + ri + shift) % h;
                let gj = (ww * window + rj + shift) % w;
                region[(gi, gj)]
            };
            for a in 0..t {
                for bb in 0..t {
                    if region_of(a) != region_of(bb) {
                        mask[IxDyn(&[widx, a, bb])] = neg;
                    }
                }
            }
        }
    }
    mask
}

/// Tiles a `[windows, T, T]` mask to `[B*windows*heads, T, T]`.
fn expand_mask<E: Elem>(mask: &ArrayD<E>, b: usize, heads: usize) -> ArrayD<E> {
    let sh = mask.shape();
    let (windows, t) = (sh[0], sh[1]);
    let mut out = ArrayD::<E>::zeros(IxDyn(&[b * windows * heads, t, t]));
    for bi in 0..b {
        for wi in 0..windows {
            for hi in 0..heads {
                let g = (bi * windows + wi) * heads + hi;
                for a in 0..t {
                    for c in 0..t {
                        out[IxDyn(&[g, a, c])] = mask[IxDyn(&[wi, a, c])];
                    }
                }
            }
        }
    }
    out
}

/// Patch merging: `[B, H, W, C] -> [B, H/2, W/2, 2C]`.
pub(crate) struct PatchMerge {
    dim: usize,
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
    ) -> Self {
        Self {
            dim,
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<E: Elem>(&self, tape: &Tape<E>, ps: &Injected, x: Var) -> Var {
        let shape = tape.shape(x);
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let c = self.dim;
        let x = tape.reshape(x, &[b, h / 2, 2, w / 2, 2, c]);
        let x = tape.permute(x, &[0, 1, 3, 2, 4, 5]);
        let x = tape.reshape(x, &[b, h / 2, w / 2, 4 * c]);
        let x = self.norm.forward(tape, ps, x);
        self.reduce.forward(tape, ps, x)
    }
}
