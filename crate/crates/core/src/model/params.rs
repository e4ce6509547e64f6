//! Named parameter storage shared by the generator and critics.
//!
//! Parameters live outside the tape; each training step injects them as
//! leaves (trainable) or constants (frozen) into a fresh [`Tape`].

use std::collections::HashMap;

use ndarray::{ArcArray, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Tape, Var};
use crate::{Error, Result};

/// Handle to one parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamStore<E: Elem> {
    names: Vec<String>,
    values: Vec<ArcArray<E, IxDyn>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>) -> PId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value.into_shared());
        PId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: PId) -> ArcArray<E, IxDyn> {
        self.values[id.0].clone()
    }

    pub fn set(&mut self, id: PId, value: ArrayD<E>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value.into_shared();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArcArray<E, IxDyn>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.values.len()).map(PId)
    }

    /// Replaces parameters by name from an external map. Unknown names are an
    /// error; missing names keep their initialized value. Shapes must match.
    pub fn load_named(&mut self, arrays: &HashMap<String, ArrayD<E>>) -> Result<usize> {
        let mut applied = 0usize;
        for (name, arr) in arrays {
            let &i = self.index.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("unknown parameter name {name}"))
            })?;
            if self.values[i].shape() != arr.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {:?}, provided {:?}",
                    self.values[i].shape(),
                    arr.shape()
                )));
            }
            self.values[i] = arr.clone().into_shared();
            applied += 1;
        }
        Ok(applied)
    }

    /// Injects every parameter into `tape`, as leaves when `trainable`.
    pub fn inject(&self, tape: &Tape<E>, trainable: bool) -> Injected {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf_shared(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                }
            })
            .collect();
        Injected { vars }
    }
}

/// Tape variables of an injected [`ParamStore`], index-aligned with it.
pub struct Injected {
    vars: Vec<Var>,
}

impl Injected {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Truncated normal initializer (resampling beyond two standard deviations).
pub fn trunc_normal<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<E> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        loop {
            // Box-Muller
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return E::from_f64(z * std);
            }
        }
    })
}

pub fn zeros<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<E: Elem>(shape: &[usize]) -> ArrayD<E> {
    ArrayD::from_elem(IxDyn(shape), E::one())
}
