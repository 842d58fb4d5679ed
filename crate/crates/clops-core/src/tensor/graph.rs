//! Dynamic reverse-mode autodiff graph.
//!
//! The graph is rebuilt on every forward pass. Nodes are append-only, so a
//! node's index is also its topological order and `backward` is a single
//! reverse sweep. Values are `Rc`-shared with the parameter store, making
//! parameter binding copy-free. A graph instance is confined to one thread;
//! ops may parallelize internally over independent output blocks only, so
//! results never depend on scheduling.

use std::rc::Rc;

use crate::elem::Elem;
use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward function: given the output gradient, return one gradient
/// contribution per parent (empty `Vec` to skip a parent).
pub(crate) type BackFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

pub(crate) struct Node<E: Elem> {
    pub value: Rc<Vec<E>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
    pub parents: Vec<Var>,
    pub backward: Option<BackFn<E>>,
}

pub struct Graph<E: Elem> {
    pub(crate) nodes: Vec<Node<E>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        value: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Var>,
        backward: Option<BackFn<E>>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            shape,
            requires_grad,
            grad: None,
            parents,
            backward: if requires_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf tensor with no gradient tracking.
    pub fn constant(&mut self, value: Vec<E>, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "constant: shape {shape:?} does not match {} values",
            value.len()
        );
        self.push(value, shape, vec![], None)
    }

    pub fn scalar(&mut self, value: E) -> Var {
        self.constant(vec![value], vec![1])
    }

    /// Leaf tensor that accumulates a gradient.
    pub fn leaf(&mut self, value: Vec<E>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            value: Rc::new(value),
            shape,
            requires_grad: true,
            grad: None,
            parents: vec![],
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter as a leaf. Gradients flow back into the store
    /// via [`Graph::collect_grads`].
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: Rc::clone(&p.value),
            shape: p.shape.clone(),
            requires_grad: true,
            grad: None,
            parents: vec![],
            backward: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Iterate over all node shapes (diagnostics and structural tests).
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.shape.as_slice())
    }

    /// Reverse sweep from a scalar loss. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let loss_val = self.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss: {loss_val}")));
        }
        // One sweep uses its own scratch gradients so that repeated calls
        // each contribute one full pass to the persistent accumulators.
        let mut pass: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let node_grad = self.nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![E::ZERO; grad.len()]);
                for (dst, src) in node_grad.iter_mut().zip(&grad) {
                    *dst += *src;
                }
            }
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let contributions = back(&grad);
            debug_assert_eq!(contributions.len(), node.parents.len());
            let parents = node.parents.clone();
            for (parent, contrib) in parents.iter().zip(contributions) {
                if contrib.is_empty() {
                    continue;
                }
                debug_assert!(parent.0 < i, "graph must be topologically ordered");
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.len(), self.nodes[parent.0].value.len());
                match &mut pass[parent.0] {
                    Some(pg) => {
                        for (dst, src) in pg.iter_mut().zip(contrib) {
                            *dst += src;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Accumulate leaf gradients into the parameter store.
    pub fn collect_grads(&self, store: &mut ParamStore<E>) {
        for &(pid, var) in &self.bindings {
            if let Some(g) = self.grad(var) {
                let dst = &mut store.params[pid].grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }
}
