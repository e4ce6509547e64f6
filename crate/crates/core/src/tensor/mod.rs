//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! The engine is tape based: every operation appends a node holding the
//! forward value and a backward closure. Graphs are rebuilt per training
//! step, which keeps the implementation simple and fully deterministic.
//! Everything is generic over [`Elem`] so tests can run gradient checks in
//! `f64` while training runs in `f32`.

mod conv;
mod linalg;
mod norm;
mod ops;


pub use conv::{col2im, conv2d_reference, im2col, ConvSpec};

use std::cell::RefCell;

use ndarray::{ArcArray, ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Scalar element type of the engine.
pub trait Elem:
    Float

    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    /// Size of one element in bytes when serialized.
    const BYTE_LEN: usize;
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_LEN: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_LEN: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&ArrayD<E>, &mut Gradients<E>)>;

struct Node<E: Elem> {
    value: ArcArray<E, IxDyn>,
    backward: Option<BackFn<E>>,
    needs_grad: bool,
}

/// Gradient accumulator indexed by tape node id.
pub struct Gradients<E: Elem> {
    slots: Vec<Option<ArrayD<E>>>,
    tracked: Vec<bool>,
}

impl<E: Elem> Gradients<E> {
    fn new(tracked: Vec<bool>) -> Self {
        Self {
            slots: (0..tracked.len()).map(|_| None).collect(),
            tracked,
        }
    }

    /// Accumulates `g` into the slot of `v`. Constants are skipped. Gradients
    /// are stored in standard layout so backward closures may reshape them.
    pub fn add(&mut self, v: Var, g: ArrayD<E>) {
        if !self.tracked[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => {
                let g = if g.is_standard_layout() {
                    g
                } else {
                    g.as_standard_layout().to_owned()
                };
                *slot = Some(g);
            }
        }
    }

    /// Gradient of the backward root with respect to `v`, if any was produced.
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<E>> {
        self.slots[v.0].take()
    }
}

/// The recording tape. One tape corresponds to one forward/backward pass.
pub struct Tape<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<E>, needs_grad: bool, backward: Option<BackFn<E>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.into_shared(),
            backward,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_shared(
        &self,
        value: ArcArray<E, IxDyn>,
        needs_grad: bool,
        backward: Option<BackFn<E>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            backward,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Inserts a constant: no gradient ever flows into it.
    pub fn constant(&self, value: ArrayD<E>) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_shared(&self, value: ArcArray<E, IxDyn>) -> Var {
        self.push_shared(value, false, None)
    }

    /// Inserts a differentiable leaf (a parameter or an input we want
    /// gradients for).
    pub fn leaf(&self, value: ArrayD<E>) -> Var {
        self.push(value, true, None)
    }

    pub fn leaf_shared(&self, value: ArcArray<E, IxDyn>) -> Var {
        self.push_shared(value, true, None)
    }

    pub fn scalar(&self, x: E) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Cheap (copy-on-write) handle to the forward value of `v`.
    pub fn value(&self, v: Var) -> ArcArray<E, IxDyn> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> E {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().expect("non-empty")
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Records an op node. `backward` is only retained when some parent
    /// requires a gradient.
    pub(crate) fn op(
        &self,
        value: ArrayD<E>,
        parents: &[Var],
        backward: impl Fn(&ArrayD<E>, &mut Gradients<E>) + 'static,
    ) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad(*p));
        let back: Option<BackFn<E>> = if needs { Some(Box::new(backward)) } else { None };
        self.push(value, needs, back)
    }

    /// Reverse pass from a scalar root. Returns the gradient accumulator.
    pub fn backward(&self, root: Var) -> Gradients<E> {
        let nodes = self.nodes.borrow();
        let tracked: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads = Gradients::new(tracked);
        let root_shape = nodes[root.0].value.raw_dim();
        grads.slots[root.0] = Some(ArrayD::ones(root_shape));
        for id in (0..=root.0).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].backward {
                let g = grads.slots[id].take().expect("checked above");
                back(&g, &mut grads);
                grads.slots[id] = Some(g);
            }
        }
        grads
    }
}
