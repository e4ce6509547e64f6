//! 2-D convolution and its transpose, implemented via im2col so the heavy
//! lifting happens inside matrix products.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, Axis, Ix1, Ix4};

use super::{Elem, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds `[C, H, W]` into `[C*k*k, L]` where `L` is the number of output
/// positions.
pub fn im2col<E: Elem>(x: &ArrayView3<'_, E>, spec: ConvSpec) -> Array2<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut cols = Array2::<E>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[(row, oi * ow + oj)] = x[(ci, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[C*k*k, L]` back onto `[C, H, W]`,
/// accumulating overlaps.
pub fn col2im<E: Elem>(cols: &ArrayView2<'_, E>, c: usize, h: usize, w: usize, spec: ConvSpec) -> ndarray::Array3<E> {
    let (oh, ow) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut out = ndarray::Array3::<E>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..oh {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out[(ci, ii as usize, jj as usize)] += cols[(row, oi * ow + oj)];
                    }
                }
            }
        }
    }
    out
}

impl<E: Elem> Tape<E> {
    /// `conv2d(x: [B, C, H, W], w: [O, C, k, k], b: [O]) -> [B, O, OH, OW]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv input 4d");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv weight 4d");
        let (bsz, c, h, wdt) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let (o, wc, k) = (w4.shape()[0], w4.shape()[1], w4.shape()[2]);
        assert_eq!(c, wc, "conv2d: channel mismatch");
        assert_eq!(k, spec.kernel, "conv2d: kernel mismatch");
        let (oh, ow) = (spec.out_size(h), spec.out_size(wdt));
        let wmat = wv
            .to_shape((o, c * k * k))
            .expect("standard layout")
            .to_owned();

        let mut y = Array4::<E>::zeros((bsz, o, oh, ow));
        let mut cols_all: Vec<Array2<E>> = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let cols = im2col(&x4.index_axis(Axis(0), bi), spec);
            let out = wmat.dot(&cols); // [O, L]
            y.index_axis_mut(Axis(0), bi).assign(
                &out.into_shape_clone((o, oh, ow)).expect("shape"),
            );
            cols_all.push(cols);
        }
        if let Some(bvar) = b {
            let bv = self.value(bvar);
            let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias 1d");
            for bi in 0..bsz {
                for oi in 0..o {
                    let mut plane = y.slice_mut(ndarray::s![bi, oi, .., ..]);
                    plane += b1[oi];
                }
            }
        }

        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.op(y.into_dyn(), &parents, move |g, acc| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4d grad");
            let mut gx = Array4::<E>::zeros((bsz, c, h, wdt));
            let mut gw = Array2::<E>::zeros((o, c * k * k));
            let mut gb = ndarray::Array1::<E>::zeros(o);
            for bi in 0..bsz {
                let gy = g4
                    .index_axis(Axis(0), bi)
                    .to_shape((o, oh * ow))
                    .expect("standard layout")
                    .to_owned();
                let gcols = wmat.t().dot(&gy); // [C*k*k, L]
                gx.index_axis_mut(Axis(0), bi)
                    .assign(&col2im(&gcols.view(), c, h, wdt, spec));
                gw += &gy.dot(&cols_all[bi].t());
                gb += &gy.sum_axis(Axis(1));
            }
            acc.add(x, gx.into_dyn());
            acc.add(
                w,
                gw.into_shape_clone((o, c, k, k)).expect("shape").into_dyn(),
            );
            if let Some(bvar) = b {
                acc.add(bvar, gb.into_dyn());
            }
        })
    }

    /// Transposed convolution: the adjoint (with respect to the input) of
    /// [`Tape::conv2d`] with the same `spec`. Maps `[B, O, OH, OW]` back to
    /// `[B, C, H, W]`, where `(OH, OW) = spec.out_size((H, W))`.
    ///
    /// This is the op that makes the critic's input-gradient expressible as a
    /// differentiable graph, which in turn makes the gradient penalty
    /// trainable with a single reverse pass.
    pub fn conv2d_transpose(&self, u: Var, w: Var, spec: ConvSpec, out_h: usize, out_w: usize) -> Var {
        let uv = self.value(u);
        let wv = self.value(w);
        let u4 = uv.view().into_dimensionality::<Ix4>().expect("input 4d");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("weight 4d");
        let (bsz, o, oh, ow) = (u4.shape()[0], u4.shape()[1], u4.shape()[2], u4.shape()[3]);
        let (wo, c, k) = (w4.shape()[0], w4.shape()[1], w4.shape()[2]);
        assert_eq!(o, wo, "conv2d_transpose: channel mismatch");
        assert_eq!(spec.out_size(out_h), oh, "conv2d_transpose: height mismatch");
        assert_eq!(spec.out_size(out_w), ow, "conv2d_transpose: width mismatch");
        let wmat = wv
            .to_shape((o, c * k * k))
            .expect("standard layout")
            .to_owned();

        let mut y = Array4::<E>::zeros((bsz, c, out_h, out_w));
        for bi in 0..bsz {
            let uflat = u4
                .index_axis(Axis(0), bi)
                .to_shape((o, oh * ow))
                .expect("standard layout")
                .to_owned();
            let cols = wmat.t().dot(&uflat); // [C*k*k, L]
            y.index_axis_mut(Axis(0), bi)
                .assign(&col2im(&cols.view(), c, out_h, out_w, spec));
        }

        let uc = uv.clone();
        self.op(y.into_dyn(), &[u, w], move |g, acc| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4d grad");
            let u4 = uc.view().into_dimensionality::<Ix4>().expect("4d");
            let mut gu = Array4::<E>::zeros((bsz, o, oh, ow));
            let mut gw = Array2::<E>::zeros((o, c * k * k));
            for bi in 0..bsz {
                let gcols = im2col(&g4.index_axis(Axis(0), bi), spec); // [C*k*k, L]
                let gout = wmat.dot(&gcols); // [O, L]
                gu.index_axis_mut(Axis(0), bi)
                    .assign(&gout.into_shape_clone((o, oh, ow)).expect("shape"));
                let uflat = u4
                    .index_axis(Axis(0), bi)
                    .to_shape((o, oh * ow))
                    .expect("standard layout")
                    .to_owned();
                gw += &uflat.dot(&gcols.t());
            }
            acc.add(u, gu.into_dyn());
            acc.add(
                w,
                gw.into_shape_clone((o, c, k, k)).expect("shape").into_dyn(),
            );
        })
    }
}

/// Reference convolution used by tests: direct nested loops, no im2col.
pub fn conv2d_reference<E: Elem>(
    x: &ArrayView3<'_, E>,
    w: &ndarray::ArrayView4<'_, E>,
    b: Option<&ndarray::ArrayView1<'_, E>>,
    spec: ConvSpec,
) -> ndarray::Array3<E> {
    let (c, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (spec.out_size(h), spec.out_size(wdt));
    let mut y = ndarray::Array3::<E>::zeros((o, oh, ow));
    for oc in 0..o {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = b.map_or(E::zero(), |bv| bv[oc]);
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wdt as isize {
                                continue;
                            }
                            acc += x[(ci, ii as usize, jj as usize)] * w[(oc, ci, ki, kj)];
                        }
                    }
                }
                y[(oc, oi, oj)] = acc;
            }
        }
    }
    y
}
