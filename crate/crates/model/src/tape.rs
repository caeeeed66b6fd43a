//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! Activations are `[batch, channels, height, width]`. Every op stores its
//! output and, when gradients are on, a closure mapping the output gradient
//! (plus the parent and output values) to gradients for each parent.

use ndarray::{ArrayD, IxDyn};

use crate::params::{ParamId, ParamStore};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Backward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Vec::new(), None, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record an op. `backward(grad_out, parent_values, out_value)` returns
    /// one gradient per parent, in order.
    pub fn push_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let back: Option<Backward> = if self.grad_enabled {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, parents.iter().map(|p| p.0).collect(), back, None)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<Backward>, param: Option<ParamId>) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite value recorded");
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pg = back(&g, &inputs, &node.value);
                debug_assert_eq!(pg.len(), node.parents.len());
                for (&p, gp) in node.parents.iter().zip(pg) {
                    debug_assert_eq!(gp.shape(), self.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => *acc += &gp,
                        slot => *slot = Some(gp),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            by_node: grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }
}

pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Parameter gradients, summed over every use of each parameter.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (g, p) in self.by_node.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                match out.iter_mut().find(|(q, _)| q == id) {
                    Some((_, acc)) => *acc += g,
                    None => out.push((*id, g.clone())),
                }
            }
        }
        out
    }
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}
