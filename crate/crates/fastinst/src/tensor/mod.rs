//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a node in a dynamically built
//! computation graph. Operations record their inputs and a backward closure;
//! [`Tensor::backward`] walks the graph in reverse topological order and
//! accumulates gradients into every node that requires them. Gradient
//! accumulation is additive: running backward twice through the same graph
//! doubles the stored gradients, and per-sample graphs that share parameter
//! leaves sum their contributions.
//!
//! Element type is generic over [`Elem`]: `f32` for training, `f64` for
//! finite-difference gradient checks (the 1e-4 tolerance is unreachable in
//! 32-bit).
//!
//! A graph is confined to one thread (`Rc`/`RefCell` storage); distinct
//! graphs on distinct threads share nothing unless they share parameter
//! tensors, which must then stay on one thread.

mod elem;
pub mod gradcheck;
pub mod ops;

pub use elem::{Dtype, Elem};
pub use gradcheck::{finite_diff_gradcheck, GradCheckReport};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Additive logit sentinel for blocked attention positions. Large enough
/// that softmax weight under it is below 1e-6 against logits of magnitude
/// up to ~50, small enough to keep arithmetic finite.
pub const BLOCK_SENTINEL: f64 = -1e9;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording disabled: ops built inside produce
/// leaf tensors with no parents.
pub fn with_no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Backward closure: given the node's parents and the gradient w.r.t. the
/// node's output, return one gradient contribution per parent slot
/// (`None` for parents that do not require grad).
type BackwardFn<E> = Box<dyn Fn(&[Tensor<E>], &[E]) -> Vec<Option<Vec<E>>>>;

struct Node<E: Elem> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

/// Shared handle to a graph node. Cloning is cheap and aliases storage.
pub struct Tensor<E: Elem>(Rc<Node<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    /// Leaf tensor from data. Validates that the data length matches the
    /// shape product.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Leaf parameter: requires grad, carries a zero-initialized accumulator.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![E::ZERO; numel], shape.to_vec(), false)
    }

    pub fn scalar(v: E) -> Self {
        Self::leaf(vec![v], vec![1], false)
    }

    fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        let grad = if requires_grad {
            Some(vec![E::ZERO; data.len()])
        } else {
            None
        };
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(grad),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Internal constructor for op outputs. Downgrades to a leaf when
    /// grad recording is off or no parent requires grad.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if !track {
            return Self::leaf(data, shape, false);
        }
        let n = data.len();
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(Some(vec![E::ZERO; n])),
            requires_grad: true,
            parents,
            backward: Some(backward),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Copy of the underlying data.
    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.borrow().clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Borrow the data in place (read-only).
    pub fn with_data<T>(&self, f: impl FnOnce(&[E]) -> T) -> T {
        f(&self.0.data.borrow())
    }

    /// Overwrite a leaf's data in place. Only valid between graph builds
    /// (optimizer steps, checkpoint loads, finite-difference probes).
    pub fn set_data(&self, new: &[E]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Mutate one coordinate in place (finite-difference probes).
    pub fn nudge(&self, idx: usize, delta: E) {
        self.0.data.borrow_mut()[idx] += delta;
    }

    /// Copy of the accumulated gradient, if this tensor requires grad.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = E::ZERO);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        match self.0.grad.borrow().as_ref() {
            Some(g) => g
                .iter()
                .map(|v| {
                    let x = v.to_f64();
                    x * x
                })
                .sum::<f64>()
                .sqrt(),
            None => 0.0,
        }
    }

    fn ptr(&self) -> *const Node<E> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode pass from a scalar output. Accumulates into the `grad`
    /// buffer of every reachable node that requires grad; repeated calls on
    /// the same graph sum their contributions.
    pub fn backward(&self) -> Result<()> {
        self.backward_seeded(E::ONE)
    }

    /// Backward with a custom seed (e.g. `1/batch` for loss averaging).
    pub fn backward_seeded(&self, seed: E) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.item().to_f64().is_finite() {
            return Err(Error::NonFinite("backward from non-finite scalar".into()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }

        let order = self.topo_order();
        let mut local: HashMap<*const Node<E>, Vec<E>> = HashMap::new();
        local.insert(self.ptr(), vec![seed]);

        for t in order.iter().rev() {
            let g = match local.remove(&t.ptr()) {
                Some(g) => g,
                None => continue,
            };
            // Persist this pass's contribution.
            if let Some(acc) = t.0.grad.borrow_mut().as_mut() {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += *b;
                }
            }
            if let Some(back) = t.0.backward.as_ref() {
                let contribs = back(&t.0.parents, &g);
                debug_assert_eq!(contribs.len(), t.0.parents.len());
                for (parent, contrib) in t.0.parents.iter().zip(contribs) {
                    let Some(c) = contrib else { continue };
                    if !parent.0.requires_grad {
                        continue;
                    }
                    debug_assert_eq!(c.len(), parent.numel());
                    match local.entry(parent.ptr()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(c.iter()) {
                                *a += *b;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(c);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS; output is a valid topological order
    /// (parents before children).
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut visited: HashMap<*const Node<E>, ()> = HashMap::new();
        let mut order: Vec<Tensor<E>> = Vec::new();
        // Stack frames: (node, next parent index to visit).
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr(), ());
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.0.requires_grad && !visited.contains_key(&parent.ptr()) {
                    visited.insert(parent.ptr(), ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn backward_accumulates_twice() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = ops::sum_all(&ops::mul(&x, &x).unwrap()).unwrap();
        y.backward().unwrap();
        let g1 = x.grad().unwrap();
        assert_eq!(g1, vec![2.0, 4.0, 6.0]);
        y.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g2, vec![4.0, 8.0, 12.0]);
    }

    #[test]
    fn shared_subgraph_sums_contributions() {
        // z = sum(x*x) + sum(x*x) reuses the same intermediate node twice.
        let x = Tensor::<f64>::param(vec![1.5, -2.0], &[2]).unwrap();
        let sq = ops::mul(&x, &x).unwrap();
        let z = ops::add(&ops::sum_all(&sq).unwrap(), &ops::sum_all(&sq).unwrap()).unwrap();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -8.0]);
    }

    #[test]
    fn no_grad_scope_builds_leaves() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = with_no_grad(|| ops::mul(&x, &x).unwrap());
        assert!(!y.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::mul(&x, &x).unwrap();
        assert!(y.backward().is_err());
    }
}
