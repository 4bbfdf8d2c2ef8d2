//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order. [`Graph::backward`] consumes the
//! graph, walks the tape from the loss down and frees each node once its
//! gradient has been propagated. Only leaf gradients survive.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one gradient per parent.
///
/// The second argument says which parents need a gradient; entries for the
/// others may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
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

    /// Records a leaf. Gradients are kept for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn input(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation result. This is the extension point for ops
    /// defined outside this crate (e.g. fused losses).
    pub fn push_op<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        self.push_shared(Rc::new(value), parents, backward)
    }

    /// Like [`push_op`](Self::push_op) for a value the backward closure also
    /// holds, so the two share one allocation.
    pub fn push_shared<F>(&self, value: Rc<Tensor<T>>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Propagates `d loss / d loss = 1` back through the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let mut nodes = self.nodes.into_inner();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        nodes.truncate(loss.0 + 1);
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut leaves = HashMap::new();

        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(grad) = grads[id].take() else {
                continue;
            };
            match node.backward {
                Some(bw) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| requires[p.0]).collect();
                    let parent_grads = bw(&grad, &needs)?;
                    for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                        let (Some(pg), true) = (pg, *need) else {
                            continue;
                        };
                        match &mut grads[p.0] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.parents.is_empty() && node.requires_grad => {
                    if grad.shape() != node.value.shape() {
                        return Err(shape_err(
                            "backward",
                            format!("leaf {id} grad {:?} vs value {:?}", grad.shape(), node.value.shape()),
                        ));
                    }
                    leaves.insert(id, grad);
                }
                None => {}
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf that the
/// loss depends on.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.input(Tensor::ones(&[3]));
        let y = g.mul(c, x).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }
}
