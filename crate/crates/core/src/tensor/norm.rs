//! Normalization and softmax family, all over the last axis.

use ndarray::{Array2, Axis, IxDyn};

use super::{Elem, Tape, Var};

impl<E: Elem> Tape<E> {
    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: E) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let shape = xv.shape().to_vec();
        let c = *shape.last().expect("non-scalar");
        assert_eq!(gv.len(), c, "layer_norm: gamma dim");
        assert_eq!(bv.len(), c, "layer_norm: beta dim");
        let rows = xv.len() / c;
        let x2 = xv.to_shape((rows, c)).expect("standard layout").to_owned();
        let inv_c = E::from_f64(1.0 / c as f64);

        let mut xhat = Array2::<E>::zeros((rows, c));
        let mut inv_std = ndarray::Array1::<E>::zeros(rows);
        for r in 0..rows {
            let row = x2.index_axis(Axis(0), r);
            let mu = row.iter().fold(E::zero(), |a, &v| a + v) * inv_c;
            let var = row
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mu) * (v - mu))
                * inv_c;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for ci in 0..c {
                xhat[(r, ci)] = (row[ci] - mu) * istd;
            }
        }
        let g1 = gv.to_shape(c).expect("1d").to_owned();
        let b1 = bv.to_shape(c).expect("1d").to_owned();
        let mut y2 = Array2::<E>::zeros((rows, c));
        for r in 0..rows {
            for ci in 0..c {
                y2[(r, ci)] = xhat[(r, ci)] * g1[ci] + b1[ci];
            }
        }
        let y = y2.into_shape_with_order(IxDyn(&shape)).expect("shape");
        let xhat_c = xhat;
        let gamma_c = g1;
        let shape_c = shape.clone();
        self.op(y, &[x, gamma, beta], move |g, acc| {
            let g2 = g.to_shape((rows, c)).expect("standard layout");
            let mut gx = Array2::<E>::zeros((rows, c));
            let mut ggamma = ndarray::Array1::<E>::zeros(c);
            let mut gbeta = ndarray::Array1::<E>::zeros(c);
            for r in 0..rows {
                // dxhat = g * gamma
                let mut sum_d = E::zero();
                let mut sum_dx = E::zero();
                for ci in 0..c {
                    let d = g2[(r, ci)] * gamma_c[ci];
                    sum_d += d;
                    sum_dx += d * xhat_c[(r, ci)];
                    ggamma[ci] += g2[(r, ci)] * xhat_c[(r, ci)];
                    gbeta[ci] += g2[(r, ci)];
                }
                let mean_d = sum_d * inv_c;
                let mean_dx = sum_dx * inv_c;
                for ci in 0..c {
                    let d = g2[(r, ci)] * gamma_c[ci];
                    gx[(r, ci)] = inv_std[r] * (d - mean_d - xhat_c[(r, ci)] * mean_dx);
                }
            }
            acc.add(
                x,
                gx.into_shape_with_order(IxDyn(&shape_c)).expect("shape").into_dyn(),
            );
            acc.add(gamma, ggamma.into_dyn());
            acc.add(beta, gbeta.into_dyn());
        })
    }

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.last().expect("non-scalar");
        let rows = xv.len() / c;
        let x2 = xv.to_shape((rows, c)).expect("standard layout").to_owned();
        let mut y2 = Array2::<E>::zeros((rows, c));
        for r in 0..rows {
            let row = x2.index_axis(Axis(0), r);
            let m = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
            let mut denom = E::zero();
            for ci in 0..c {
                let e = (row[ci] - m).exp();
                y2[(r, ci)] = e;
                denom += e;
            }
            for ci in 0..c {
                y2[(r, ci)] = y2[(r, ci)] / denom;
            }
        }
        let y = y2.clone().into_shape_with_order(IxDyn(&shape)).expect("shape");
        let shape_c = shape.clone();
        self.op(y, &[x], move |g, acc| {
            let g2 = g.to_shape((rows, c)).expect("standard layout");
            let mut gx = Array2::<E>::zeros((rows, c));
            for r in 0..rows {
                let mut dot = E::zero();
                for ci in 0..c {
                    dot += g2[(r, ci)] * y2[(r, ci)];
                }
                for ci in 0..c {
                    gx[(r, ci)] = y2[(r, ci)] * (g2[(r, ci)] - dot);
                }
            }
            acc.add(
                x,
                gx.into_shape_with_order(IxDyn(&shape_c)).expect("shape").into_dyn(),
            );
        })
    }

    /// Log-softmax over the last axis via the max-subtraction form.
    pub fn log_softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.last().expect("non-scalar");
        let rows = xv.len() / c;
        let x2 = xv.to_shape((rows, c)).expect("standard layout").to_owned();
        let mut y2 = Array2::<E>::zeros((rows, c));
        let mut p2 = Array2::<E>::zeros((rows, c)); // softmax, cached for backward
        for r in 0..rows {
            let row = x2.index_axis(Axis(0), r);
            let m = row.iter().fold(E::neg_infinity(), |a, &v| a.max(v));
            let mut denom = E::zero();
            for ci in 0..c {
                denom += (row[ci] - m).exp();
            }
            let lse = m + denom.ln();
            for ci in 0..c {
                y2[(r, ci)] = row[ci] - lse;
                p2[(r, ci)] = (row[ci] - lse).exp();
            }
        }
        let y = y2.into_shape_with_order(IxDyn(&shape)).expect("shape");
        let shape_c = shape.clone();
        self.op(y, &[x], move |g, acc| {
            let g2 = g.to_shape((rows, c)).expect("standard layout");
            let mut gx = Array2::<E>::zeros((rows, c));
            for r in 0..rows {
                let mut gsum = E::zero();
                for ci in 0..c {
                    gsum += g2[(r, ci)];
                }
                for ci in 0..c {
                    gx[(r, ci)] = g2[(r, ci)] - p2[(r, ci)] * gsum;
                }
            }
            acc.add(
                x,
                gx.into_shape_with_order(IxDyn(&shape_c)).expect("shape").into_dyn(),
            );
        })
    }
}
