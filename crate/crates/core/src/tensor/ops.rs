//! Elementwise operations, reductions and shape manipulation.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Elem, Tape, Var};

impl<E: Elem> Tape<E> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let y = (&av + &bv).to_owned();
        self.op(y, &[a, b], move |g, acc| {
            acc.add(a, g.clone());
            acc.add(b, g.clone());
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let y = (&av - &bv).to_owned();
        self.op(y, &[a, b], move |g, acc| {
            acc.add(a, g.clone());
            acc.add(b, g.mapv(|v| -v));
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let y = (&av * &bv).to_owned();
        let (ac, bc) = (av.clone(), bv.clone());
        self.op(y, &[a, b], move |g, acc| {
            acc.add(a, (g * &bc).to_owned());
            acc.add(b, (g * &ac).to_owned());
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "div: shape mismatch");
        let y = (&av / &bv).to_owned();
        let (ac, bc) = (av.clone(), bv.clone());
        self.op(y, &[a, b], move |g, acc| {
            acc.add(a, (g / &bc).to_owned());
            let gb = ndarray::Zip::from(g)
                .and(&ac)
                .and(&bc)
                .map_collect(|&gi, &ai, &bi| -gi * ai / (bi * bi));
            acc.add(b, gb);
        })
    }

    /// `scale * x + shift`, elementwise with scalars.
    pub fn affine(&self, x: Var, scale: E, shift: E) -> Var {
        let y = self.value(x).mapv(|v| scale * v + shift);
        self.op(y, &[x], move |g, acc| {
            acc.add(x, g.mapv(|v| v * scale));
        })
    }

    /// Elementwise multiplication with a constant array (no grad to the mask).
    pub fn mul_const(&self, x: Var, mask: ArrayD<E>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mul_const: shape mismatch");
        let y = (&xv.view() * &mask.view()).to_owned();
        let mc = mask;
        self.op(y, &[x], move |g, acc| {
            acc.add(x, (g * &mc.view()).to_owned());
        })
    }

    /// Elementwise addition of a constant array.
    pub fn add_const(&self, x: Var, c: ArrayD<E>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape(), "add_const: shape mismatch");
        let y = (&xv.view() + &c.view()).to_owned();
        self.op(y, &[x], move |g, acc| {
            acc.add(x, g.clone());
        })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, E::from_f64(-1.0), E::zero())
    }

    pub fn sqr(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| v * v);
        let xc = xv.clone();
        let two = E::from_f64(2.0);
        self.op(y, &[x], move |g, acc| {
            acc.add(x, ndarray::Zip::from(g).and(&xc).map_collect(|&gi, &xi| gi * two * xi));
        })
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| v.sqrt());
        let yc = y.clone();
        let half = E::from_f64(0.5);
        self.op(y, &[x], move |g, acc| {
            acc.add(
                x,
                ndarray::Zip::from(g).and(&yc).map_collect(|&gi, &yi| gi * half / yi),
            );
        })
    }

    pub fn exp(&self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.exp());
        let yc = y.clone();
        self.op(y, &[x], move |g, acc| {
            acc.add(x, (g * &yc.view()).to_owned());
        })
    }

    pub fn ln(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| v.ln());
        let xc = xv.clone();
        self.op(y, &[x], move |g, acc| {
            acc.add(x, ndarray::Zip::from(g).and(&xc).map_collect(|&gi, &xi| gi / xi));
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| {
            let one = E::one();
            one / (one + (-v).exp())
        });
        let yc = y.clone();
        self.op(y, &[x], move |g, acc| {
            acc.add(
                x,
                ndarray::Zip::from(g)
                    .and(&yc)
                    .map_collect(|&gi, &yi| gi * yi * (E::one() - yi)),
            );
        })
    }

    pub fn leaky_relu(&self, x: Var, slope: E) -> Var {
        let xv = self.value(x);
        let y = xv.mapv(|v| if v > E::zero() { v } else { slope * v });
        let xc = xv.clone();
        self.op(y, &[x], move |g, acc| {
            acc.add(
                x,
                ndarray::Zip::from(g)
                    .and(&xc)
                    .map_collect(|&gi, &xi| if xi > E::zero() { gi } else { gi * slope }),
            );
        })
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let xv = self.value(x);
        let y = xv.mapv(|v| {
            let inner = c * (v + k * v * v * v);
            half * v * (E::one() + inner.tanh())
        });
        let xc = xv.clone();
        self.op(y, &[x], move |g, acc| {
            let local = ndarray::Zip::from(g).and(&xc).map_collect(|&gi, &v| {
                let inner = c * (v + k * v * v * v);
                let t = inner.tanh();
                let sech2 = E::one() - t * t;
                let dinner = c * (E::one() + E::from_f64(3.0) * k * v * v);
                gi * (half * (E::one() + t) + half * v * sech2 * dinner)
            });
            acc.add(x, local);
        })
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().fold(E::zero(), |a, &b| a + b);
        let shape = xv.raw_dim();
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        self.op(y, &[x], move |g, acc| {
            let gv = *g.iter().next().expect("scalar grad");
            acc.add(x, ArrayD::from_elem(shape.clone(), gv));
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.affine(s, E::from_f64(1.0 / n as f64), E::zero())
    }

    /// Sums every axis except the leading (batch) one: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&self, x: Var) -> Var {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let shape = xv.raw_dim();
        let flat = xv
            .to_shape((b, xv.len() / b))
            .expect("standard layout")
            .to_owned();
        let y = flat.sum_axis(Axis(1)).into_dyn();
        self.op(y, &[x], move |g, acc| {
            let mut out = ArrayD::<E>::zeros(shape.clone());
            let per = out.len() / b;
            {
                let mut flat_out = out
                    .view_mut()
                    .into_shape_with_order((b, per))
                    .expect("standard layout");
                for (i, mut row) in flat_out.outer_iter_mut().enumerate() {
                    let gi = g[IxDyn(&[i])];
                    row.fill(gi);
                }
            }
            acc.add(x, out);
        })
    }

    /// Mean over the two trailing spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        assert_eq!(sh.len(), 4, "mean_spatial expects NCHW");
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let flat = xv.to_shape((b, c, h * w)).expect("standard layout").to_owned();
        let y = flat.sum_axis(Axis(2)).mapv(|v| v * inv).into_dyn();
        self.op(y, &[x], move |g, acc| {
            let mut out = ArrayD::<E>::zeros(IxDyn(&[b, c, h, w]));
            {
                let mut fo = out
                    .view_mut()
                    .into_shape_with_order((b, c, h * w))
                    .expect("standard layout");
                for i in 0..b {
                    for j in 0..c {
                        let gv = g[IxDyn(&[i, j])] * inv;
                        fo.slice_mut(ndarray::s![i, j, ..]).fill(gv);
                    }
                }
            }
            acc.add(x, out);
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old_shape = xv.shape().to_vec();
        let y = xv
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        self.op(y, &[x], move |g, acc| {
            acc.add(
                x,
                g.to_shape(IxDyn(&old_shape)).expect("reshape back").to_owned(),
            );
        })
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        let y = xv
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.op(y, &[x], move |g, acc| {
            acc.add(
                x,
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned(),
            );
        })
    }

    /// Cyclic shift along axes 1 and 2 of a `[B, H, W, C]` tensor.
    pub fn roll_hw(&self, x: Var, shift_h: isize, shift_w: isize) -> Var {
        let xv = self.value(x);
        let y = roll_array(&xv.view().to_owned(), shift_h, shift_w);
        self.op(y, &[x], move |g, acc| {
            acc.add(x, roll_array(g, -shift_h, -shift_w));
        })
    }

    /// Concatenates along `axis`.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let parts_owned = parts.to_vec();
        self.op(y, parts, move |g, acc| {
            let mut start = 0isize;
            for (i, &p) in parts_owned.iter().enumerate() {
                let len = sizes[i] as isize;
                let gp = g
                    .slice_axis(Axis(axis), Slice::new(start, Some(start + len), 1))
                    .as_standard_layout()
                    .to_owned();
                acc.add(p, gp);
                start += len;
            }
        })
    }

    /// Broadcasts a `[C]` vector to `[B, C, H, W]`; backward sums over batch
    /// and space.
    pub fn broadcast_chan_nchw(&self, v: Var, b: usize, h: usize, w: usize) -> Var {
        let vv = self.value(v);
        let c = vv.len();
        let v1 = vv.to_shape(c).expect("1d").to_owned();
        let mut y = ArrayD::<E>::zeros(IxDyn(&[b, c, h, w]));
        for bi in 0..b {
            for ci in 0..c {
                y.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v1[ci]);
            }
        }
        self.op(y, &[v], move |g, acc| {
            let mut gv = ndarray::Array1::<E>::zeros(c);
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().expect("4d");
            for bi in 0..b {
                for ci in 0..c {
                    gv[ci] += g4.slice(ndarray::s![bi, ci, .., ..]).sum();
                }
            }
            acc.add(v, gv.into_dyn());
        })
    }

    /// Adds `b` (shape `[K, rest..]`) to `a` (shape `[r*K, rest..]`) by tiling
    /// `b` along the leading axis.
    pub fn add_tiled(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let k = bv.shape()[0];
        let rk = av.shape()[0];
        assert!(rk % k == 0, "add_tiled: leading axes incompatible");
        assert_eq!(&av.shape()[1..], &bv.shape()[1..], "add_tiled: trailing shape");
        let r = rk / k;
        let mut y = av.to_owned();
        for chunk in 0..r {
            let mut part = y.slice_axis_mut(
                Axis(0),
                Slice::new((chunk * k) as isize, Some(((chunk + 1) * k) as isize), 1),
            );
            part += &bv.view();
        }
        let bshape = bv.raw_dim();
        self.op(y, &[a, b], move |g, acc| {
            acc.add(a, g.clone());
            let mut gb = ArrayD::<E>::zeros(bshape.clone());
            for chunk in 0..r {
                let part = g.slice_axis(
                    Axis(0),
                    Slice::new((chunk * k) as isize, Some(((chunk + 1) * k) as isize), 1),
                );
                gb += &part;
            }
            acc.add(b, gb);
        })
    }
}

fn roll_array<E: Elem>(x: &ArrayD<E>, shift_h: isize, shift_w: isize) -> ArrayD<E> {
    let sh = x.shape().to_vec();
    assert_eq!(sh.len(), 4, "roll_hw expects [B, H, W, C]");
    let (h, w) = (sh[1] as isize, sh[2] as isize);
    let mut out = ArrayD::<E>::zeros(x.raw_dim());
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().expect("4d");
    let mut o4 = out
        .view_mut()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4d");
    for b in 0..sh[0] {
        for i in 0..h {
            let si = (i - shift_h).rem_euclid(h) as usize;
            for j in 0..w {
                let sj = (j - shift_w).rem_euclid(w) as usize;
                for c in 0..sh[3] {
                    o4[(b, i as usize, j as usize, c)] = x4[(b, si, sj, c)];
                }
            }
        }
    }
    out
}
