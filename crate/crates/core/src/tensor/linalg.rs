//! Matrix products and affine layers.

use ndarray::{Array3, Axis, Ix2, Ix3};

use super::{Elem, Tape, Var};

impl<E: Elem> Tape<E> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dims");
        let y = a2.dot(&b2).into_dyn();
        let (ac, bc) = (av.clone(), bv.clone());
        self.op(y, &[a, b], move |g, acc| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2d grad");
            let a2 = ac.view().into_dimensionality::<Ix2>().expect("2d");
            let b2 = bc.view().into_dimensionality::<Ix2>().expect("2d");
            acc.add(a, g2.dot(&b2.t()).into_dyn());
            acc.add(b, a2.t().dot(&g2).into_dyn());
        })
    }

    /// Affine layer applied to the last axis: `[..., C] x [C, D] (+ [D])`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("weight 2d");
        let (cin, cout) = (w2.shape()[0], w2.shape()[1]);
        let xshape = xv.shape().to_vec();
        assert_eq!(*xshape.last().expect("non-scalar"), cin, "linear: in dim");
        let rows = xv.len() / cin;
        let x2 = xv.to_shape((rows, cin)).expect("standard layout").to_owned();
        let mut y2 = x2.dot(&w2);
        if let Some(bvar) = b {
            let bv = self.value(bvar);
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias 1d");
            assert_eq!(b1.len(), cout, "linear: bias dim");
            y2 += &b1;
        }
        let mut yshape = xshape.clone();
        *yshape.last_mut().expect("non-scalar") = cout;
        let y = y2.into_shape_clone(ndarray::IxDyn(&yshape)).expect("shape");
        let (xc, wc) = (xv.clone(), wv.clone());
        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.op(y, &parents, move |g, acc| {
            let g2 = g.to_shape((rows, cout)).expect("standard layout");
            let x2 = xc.to_shape((rows, cin)).expect("standard layout");
            let w2 = wc.view().into_dimensionality::<Ix2>().expect("2d");
            let gx = g2.dot(&w2.t());
            acc.add(
                x,
                gx.into_shape_clone(ndarray::IxDyn(&xshape)).expect("shape"),
            );
            acc.add(w, x2.t().dot(&g2).into_dyn());
            if let Some(bvar) = b {
                acc.add(bvar, g2.sum_axis(Axis(0)).into_dyn());
            }
        })
    }

    /// Batched matmul `[G, m, k] x [G, k, n] -> [G, m, n]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm lhs 3d");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm rhs 3d");
        let (g_, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        let n = b3.shape()[2];
        assert_eq!(b3.shape()[0], g_, "bmm: batch dims");
        assert_eq!(b3.shape()[1], k, "bmm: inner dims");
        let mut y = Array3::<E>::zeros((g_, m, n));
        for i in 0..g_ {
            y.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let (ac, bc) = (av.clone(), bv.clone());
        self.op(y.into_dyn(), &[a, b], move |g, acc| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
            let a3 = ac.view().into_dimensionality::<Ix3>().expect("3d");
            let b3 = bc.view().into_dimensionality::<Ix3>().expect("3d");
            let mut ga = Array3::<E>::zeros((g_, m, k));
            let mut gb = Array3::<E>::zeros((g_, k, n));
            for i in 0..g_ {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                gb.index_axis_mut(Axis(0), i)
                    .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
            }
            acc.add(a, ga.into_dyn());
            acc.add(b, gb.into_dyn());
        })
    }

    /// Batched matmul with the rhs transposed: `[G, m, k] x [G, n, k]^T -> [G, m, n]`.
    pub fn batch_matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a3 = av.view().into_dimensionality::<Ix3>().expect("bmm lhs 3d");
        let b3 = bv.view().into_dimensionality::<Ix3>().expect("bmm rhs 3d");
        let (g_, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        let n = b3.shape()[1];
        assert_eq!(b3.shape()[0], g_, "bmm_nt: batch dims");
        assert_eq!(b3.shape()[2], k, "bmm_nt: inner dims");
        let mut y = Array3::<E>::zeros((g_, m, n));
        for i in 0..g_ {
            y.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t()));
        }
        let (ac, bc) = (av.clone(), bv.clone());
        self.op(y.into_dyn(), &[a, b], move |g, acc| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3d grad");
            let a3 = ac.view().into_dimensionality::<Ix3>().expect("3d");
            let b3 = bc.view().into_dimensionality::<Ix3>().expect("3d");
            let mut ga = Array3::<E>::zeros((g_, m, k));
            let mut gb = Array3::<E>::zeros((g_, n, k));
            for i in 0..g_ {
                let gi = g3.index_axis(Axis(0), i);
                ga.index_axis_mut(Axis(0), i)
                    .assign(&gi.dot(&b3.index_axis(Axis(0), i)));
                gb.index_axis_mut(Axis(0), i)
                    .assign(&gi.t().dot(&a3.index_axis(Axis(0), i)));
            }
            acc.add(a, ga.into_dyn());
            acc.add(b, gb.into_dyn());
        })
    }
}
