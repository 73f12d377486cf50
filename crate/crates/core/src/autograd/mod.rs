//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Nodes that do
//! not depend on any gradient-requiring leaf carry no backward closure, so
//! frozen sub-networks cost only their forward evaluation while gradients
//! still flow *through* them into upstream inputs.

mod conv;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

pub use conv::Conv2dSpec;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A value whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op. `backward` receives the output gradient and a mask of
    /// which parents need a gradient; it returns one entry per parent.
    pub fn custom_op<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        self.custom_op_rc(Rc::new(value), parents, backward)
    }

    /// Like [`Graph::custom_op`] but lets the closure share the output buffer.
    pub fn custom_op_rc<F>(&self, value: Rc<Tensor>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let shape = self.shape(output);
        assert_eq!(shape.iter().product::<usize>(), 1, "backward() needs a scalar output, got {shape:?}");
        self.backward_with(output, Tensor::full(&shape, 1.0))
    }

    /// Backpropagates an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients collected by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, if anything flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
