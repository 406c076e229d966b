//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Nodes created from inputs that
//! do not require gradients keep no parents, so inference graphs release their
//! intermediates as soon as the last handle is dropped.

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Computes parent gradients from `(grad_out, parents, out_value)`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that accumulates gradients.
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value,
                requires_grad: true,
                parents,
                backward: Some(backward),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Cuts the graph: same value, no gradient flow.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self) -> Grads {
        assert_eq!(self.value().len(), 1, "backward() requires a scalar output");
        self.backward_with(Tensor::ones(self.shape()))
    }

    /// Back-propagates an explicit output gradient (vector-Jacobian product).
    pub fn backward_with(&self, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        if !self.requires_grad() {
            return Grads { grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let parent_grads = backward(&g, &node.0.parents, &node.0.value);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                match grads.get_mut(&parent.id()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Grads { grads }
    }

    /// Post-order over grad-requiring nodes; iterative to survive deep graphs.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && seen.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Gradients of leaves reached by a backward pass.
pub struct Grads {
    grads: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates() {
        let x = Var::leaf(Tensor::new(&[2], vec![1.0, -2.0]));
        // y = sum(x*x + x) -> dy/dx = 2x + 1
        let y = x.mul(&x).add(&x).sum();
        let g = y.backward();
        assert_eq!(g.get(&x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn constants_drop_parents() {
        let a = Var::constant(Tensor::ones(&[3]));
        let b = a.scale(2.0);
        assert!(!b.requires_grad());
        let g = b.sum().backward();
        assert!(g.get(&a).is_none());
    }
}
