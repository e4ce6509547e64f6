//! Decoupled-weight-decay adaptive-moment optimizer.

use ndarray::ArrayD;

use crate::model::params::ParamStore;
use crate::model::Injected;
use crate::tensor::{Elem, Gradients};

/// Adam with decoupled weight decay. Moment buffers are index-aligned with
/// the [`ParamStore`] the optimizer was created for.
pub struct AdamW<E: Elem> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
    t: u64,
}

impl<E: Elem> AdamW<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let zeros = |_: ()| {
            store
                .ids()
                .map(|id| ArrayD::zeros(store.get(id).raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over every parameter that received a gradient. Parameters
    /// without a gradient are left untouched entirely (no decay either), so
    /// an unused head is bit-identical to a never-built one.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        injected: &Injected,
        grads: &Gradients<E>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (E::from_f64(self.beta1), E::from_f64(self.beta2));
        let (one_m_b1, one_m_b2) = (E::one() - b1, E::one() - b2);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let lr_e = E::from_f64(lr);
        let wd = E::from_f64(weight_decay);
        let eps = E::from_f64(self.eps);

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(injected.var(id)) else {
                continue;
            };
            let mut theta = store.get(id).to_owned();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            debug_assert_eq!(g.shape(), theta.shape(), "gradient shape for {}", store.name(id));
            azip(m, v, &mut theta, g, |m, v, th, &g| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *th = *th - lr_e * (m_hat / (v_hat.sqrt() + eps)) - lr_e * wd * *th;
            });
            store.set(id, theta);
        }
    }

    /// Moment buffers as named arrays, for checkpointing.
    pub fn state_arrays(&self, store: &ParamStore<E>) -> Vec<(String, ArrayD<E>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for id in store.ids() {
            out.push((format!("m.{}", store.name(id)), self.m[id.0].clone()));
            out.push((format!("v.{}", store.name(id)), self.v[id.0].clone()));
        }
        out
    }

    /// Restores moment buffers saved by [`state_arrays`](Self::state_arrays).
    pub fn load_state(
        &mut self,
        store: &ParamStore<E>,
        arrays: &[(String, ArrayD<E>)],
        t: u64,
    ) -> crate::Result<()> {
        use std::collections::HashMap;
        let map: HashMap<&str, &ArrayD<E>> =
            arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for id in store.ids() {
            for (prefix, buf) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{}", store.name(id));
                let arr = map.get(key.as_str()).ok_or_else(|| {
                    crate::Error::Checkpoint(format!("optimizer state misses {key}"))
                })?;
                if arr.shape() != buf[id.0].shape() {
                    return Err(crate::Error::Checkpoint(format!(
                        "optimizer state {key}: shape {:?} vs parameter {:?}",
                        arr.shape(),
                        buf[id.0].shape()
                    )));
                }
                buf[id.0] = (*arr).clone();
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Element-wise four-array traversal in one fixed order.
fn azip<E: Elem>(
    m: &mut ArrayD<E>,
    v: &mut ArrayD<E>,
    theta: &mut ArrayD<E>,
    g: &ArrayD<E>,
    mut f: impl FnMut(&mut E, &mut E, &mut E, &E),
) {
    let ms = m.as_slice_mut().expect("contiguous");
    let vs = v.as_slice_mut().expect("contiguous");
    let ts = theta.as_slice_mut().expect("contiguous");
    let gs = g.as_slice().expect("contiguous");
    for i in 0..ts.len() {
        f(&mut ms[i], &mut vs[i], &mut ts[i], &gs[i]);
    }
}
