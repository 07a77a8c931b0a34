//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles; each one
//! records enough state to replay its adjoint. [`Tape::backward`] walks the
//! records in reverse and returns a [`Gradients`] table.
//!
//! Parameters live outside the tape in a [`ParamStore`]. Binding one with
//! [`Tape::param`] copies its value in as a leaf; frozen parameters are bound
//! without gradient tracking so no adjoint work is spent on them.

pub mod kernels;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use ops::{AlgebraKind, ConvKind, SpanAttention, BCE_CLAMP, LAYER_NORM_EPS, MINMAX_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: ops::Op<T>,
    pub needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    inference: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            inference: false,
        }
    }

    /// A tape that binds every parameter as a constant, so no adjoint
    /// state is recorded. Used for prediction.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, ops::Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Binds a stored parameter (once per tape). Frozen parameters enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let mut t = p.tensor.clone();
        t.requires_grad = p.trainable && !self.inference;
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: ops::Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Distance of the recorded point from the nearest kink: the smallest
    /// |x| over ReLU inputs that need gradients, and the smallest gap
    /// between the two largest or two smallest entries of a min-max
    /// normalization. Infinite when the graph is smooth.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                ops::Op::Relu { x } if node.needs_grad => {
                    for v in self.data(x) {
                        margin = margin.min(v.to_f64().unwrap_or(0.0).abs());
                    }
                }
                ops::Op::MinMaxNorm { x, .. } if node.needs_grad => {
                    let mut v: Vec<f64> = self.data(x).iter().map(|t| t.to_f64().unwrap_or(0.0)).collect();
                    if v.len() >= 2 {
                        v.sort_by(f64::total_cmp);
                        let n = v.len();
                        margin = margin.min(v[1] - v[0]).min(v[n - 1] - v[n - 2]);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.adjoint(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds every bound parameter's gradient into the store's grad buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        let mut bound: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort_by_key(|&(id, _)| id);
        for (id, v) in bound {
            if let Some(g) = grads.wrt(v) {
                store.add_grad(id, g);
            }
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub(crate) fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Result of [`Tape::backward`]: one optional buffer per recorded value.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when no path from the loss reaches it.
    pub fn wrt_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.wrt(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
    }
}
