//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied to variables that require gradients.
//! With recording off (inference) ops only compute values and intermediate
//! tensors are freed as soon as their [`Var`] handles drop.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value in a [`Graph`]; cheap to clone.
#[derive(Clone)]
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// First element; intended for scalar losses.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }

    pub fn rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.grads.get(id).and_then(|g| g.as_ref()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|id| self.grads.get_mut(id).and_then(|g| g.take()))
    }
}

pub struct Graph<T> {
    tape: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Graph<T> {
    /// A graph that records ops for a later backward pass.
    pub fn new() -> Self {
        Self {
            tape: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Self {
            tape: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<T> {
        Var { value, node: None }
    }

    /// A trainable leaf. Falls back to a constant when not recording.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { value, node: None };
        }
        let mut tape = self.tape.borrow_mut();
        tape.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some(tape.len() - 1),
        }
    }

    /// Record `value` as the output of an op over `parents`.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let any = parents.iter().any(|p| p.node.is_some());
        if !self.recording || !any {
            return Var {
                value: Rc::new(value),
                node: None,
            };
        }
        let mut tape = self.tape.borrow_mut();
        tape.push(Node {
            parents: parents.iter().map(|p| p.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            node: Some(tape.len() - 1),
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Gradients<T> {
        let tape = self.tape.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..tape.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Gradients { grads };
        };
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &tape[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let parent_grads = backward(&grad, &needs);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub use ops::{Activation, IndexMap, SKIP};

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(x: &[f64], upstream: f64, f: impl Fn(&Graph<f64>, &Var<f64>) -> Var<f64>) -> Vec<f64> {
        let g = Graph::new();
        let v = g.leaf(Tensor::from_vec(&[x.len()], x.to_vec()).unwrap());
        let out = f(&g, &v);
        let loss = g.mul_scalar(&g.sum(&out), upstream);
        g.backward(&loss).get(&v).unwrap().data().to_vec()
    }

    #[test]
    fn lower_bound_passes_upward_gradients_only() {
        let x = [-1.0, 0.05, 0.11, 2.0];
        let down = grad_of(&x, 1.0, |g, v| g.lower_bound(v, 0.11));
        assert_eq!(down, vec![0.0, 0.0, 1.0, 1.0]);
        let up = grad_of(&x, -1.0, |g, v| g.lower_bound(v, 0.11));
        assert_eq!(up, vec![-1.0; 4]);
        let clamp = grad_of(&x, -1.0, |g, v| g.clamp_min(v, 0.11));
        assert_eq!(clamp, vec![0.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn likelihood_floor_passes_rate_gradient() {
        // A residual far in the tail is floored; −log p still pulls σ up.
        let g = Graph::new();
        let v = g.constant(Tensor::from_vec(&[1], vec![7.0]).unwrap());
        let mu = g.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let sigma = g.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let p = g.gaussian_likelihood(&v, &mu, &sigma, 1e-9);
        assert_eq!(p.item(), 1e-9);
        let rate = g.neg_log2_sum(&p);
        let gs = g.backward(&rate).get(&sigma).unwrap().data()[0];
        assert!(gs < 0.0, "rate should decrease with larger σ, got {gs}");
        let loss = g.sum(&p);
        let gs = g.backward(&loss).get(&sigma).unwrap().data()[0];
        assert_eq!(gs, 0.0);
    }
}
