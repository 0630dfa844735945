//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted graph node. Operations record their
//! parents and a backward closure only while gradient tracking is enabled
//! and at least one input requires a gradient; otherwise the result is a
//! constant and intermediates are freed as soon as they go out of scope.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::collections::HashSet;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the upstream gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Differentiable tensor handle.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that accumulates its gradient on [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Var::requires_grad);
        if !track {
            return Var::constant(value);
        }
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            grad: RefCell::new(None),
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.0.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self) -> Option<Ref<'_, Tensor<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Mutable access to a leaf's value, copying it if the node is shared.
    pub fn leaf_value_mut(&mut self) -> &mut Tensor<T> {
        assert!(self.is_leaf(), "leaf_value_mut on an interior node");
        if Rc::get_mut(&mut self.0).is_none() {
            let fresh = Node {
                value: self.0.value.clone(),
                requires_grad: self.0.requires_grad,
                grad: RefCell::new(self.0.grad.borrow().clone()),
                parents: Vec::new(),
                backward: None,
            };
            self.0 = Rc::new(fresh);
        }
        &mut Rc::get_mut(&mut self.0).unwrap().value
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from this node, seeding with ones of its shape.
    pub fn backward(&self) {
        self.backward_with(Tensor::ones(self.shape()));
    }

    /// Back-propagates with an explicit upstream gradient.
    pub fn backward_with(&self, seed: Tensor<T>) {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node<T>, Tensor<T>> = HashMap::new();
        pending.insert(self.key(), seed);
        for var in order.iter().rev() {
            let Some(g) = pending.remove(&var.key()) else { continue };
            match &var.0.backward {
                None => {
                    let mut slot = var.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g, &var.0.parents);
                    debug_assert_eq!(parent_grads.len(), var.0.parents.len());
                    for (parent, pg) in var.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                        match pending.get_mut(&parent.key()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                pending.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Nodes requiring gradients, parents before children.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.key()) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
