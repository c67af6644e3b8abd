//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with an optional [`Backward`] rule. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid topological order.
//! Parameters enter the tape through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are read back with
//! [`Graph::param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of a recorded operation.
///
/// `grad` is the gradient of the objective with respect to the node `out`;
/// implementations push contributions for their parents into `sink`.
pub trait Backward {
    fn backward(&self, out: Var, grad: &[f64], values: &[Tensor], sink: &mut GradSink<'_>);
}

/// Accumulator handed to [`Backward::backward`].
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    requires: &'a [bool],
    values: &'a [Tensor],
}

impl GradSink<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Zero-initialised (on first use) gradient buffer of `v`.
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let n = self.values[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        for (s, x) in self.slot(v).iter_mut().zip(g) {
            *s += x;
        }
    }

    pub fn accumulate_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (s, x) in existing.iter_mut().zip(&g) {
                    *s += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Option<Box<dyn Backward>>>,
    requires: Vec<bool>,
    params: Vec<Option<ParamId>>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only. Every node reports
    /// `requires_grad == false`, so ops skip their backward caches.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        !self.no_grad
    }

    fn push_node(&mut self, value: Tensor, op: Option<Box<dyn Backward>>, requires: bool, param: Option<ParamId>) -> Var {
        let v = Var(self.values.len());
        self.values.push(value);
        self.ops.push(if requires { op } else { None });
        self.requires.push(requires);
        self.params.push(param);
        self.grads.push(None);
        v
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, None, false, None)
    }

    /// Free input that receives a gradient (used for input-gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let req = !self.no_grad;
        self.push_node(value, None, req, None)
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// id return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let req = !self.no_grad;
        let v = self.push_node(store.get(id).clone(), None, req, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    /// True if any of `parents` carries a gradient.
    pub fn any_requires(&self, parents: &[Var]) -> bool {
        !self.no_grad && parents.iter().any(|p| self.requires[p.0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Records a computed value with its gradient rule.
    pub fn push(&mut self, value: Tensor, op: impl Backward + 'static, parents: &[Var]) -> Var {
        let req = self.any_requires(parents);
        self.push_node(value, Some(Box::new(op)), req, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagates an explicit upstream gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.values[root.0].len() {
            return Err(Error::Shape("seed length differs from root value".into()));
        }
        if !self.requires[root.0] {
            return Ok(());
        }
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(op) = self.ops[i].as_ref() else {
                continue;
            };
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut self.grads,
                requires: &self.requires,
                values: &self.values,
            };
            op.backward(Var(i), &g, &self.values, &mut sink);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradients of every parameter that was used on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
