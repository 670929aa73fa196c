//! Dense f64 tensor with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation except for gradient accumulation and
//! in-place parameter updates between steps. Every differentiable primitive
//! links its output into a dynamically built computation graph; calling
//! [`Tensor::backward`] on a scalar loss walks that graph once in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires them. Gradients accumulate across graphs until explicitly
//! zeroed.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{XmError, XmResult};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Context handed to a primitive's backward rule.
pub(crate) struct BackwardArgs<'a> {
    /// Forward output of the node.
    pub out_data: &'a [f64],
    /// Gradient of the loss with respect to the node's output.
    pub out_grad: &'a [f64],
    /// Forward data of each parent, in registration order.
    pub parents: &'a [&'a [f64]],
    /// Per-parent gradient buffers (zero-initialized) to accumulate into.
    pub grads: &'a mut [Vec<f64>],
}

pub(crate) type BackwardFn = Box<dyn Fn(BackwardArgs<'_>)>;

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_ran: Cell<bool>,
}

/// Shared handle to a tensor value and (optionally) its graph node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Disables graph construction while alive; used for inference paths.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = NO_GRAD.with(|c| c.replace(true));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        NO_GRAD.with(|c| c.set(prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                backward_ran: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape, data, false)
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new_leaf(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::from_vec(shape, data);
        }
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
                backward_ran: Cell::new(false),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no gradient tracking, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec())
    }

    /// In-place update of a leaf tensor's values (parameter step).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    /// Mutate values through a closure (used by the optimizer).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Add a contribution into the gradient slot (allocating it on first use).
    pub fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Populates `grad` on every reachable tensor with `requires_grad`. Each
    /// graph may be swept once; gradients accumulate across sweeps of
    /// different graphs until zeroed.
    pub fn backward(&self) -> XmResult<()> {
        if self.numel() != 1 {
            return Err(XmError::LossNotScalar(self.inner.shape.clone()));
        }
        if !self.inner.requires_grad {
            return Err(XmError::InvalidArgument(
                "backward on a tensor that is not part of a gradient graph".into(),
            ));
        }
        if self.inner.backward_ran.get() {
            return Err(XmError::BackwardTwice);
        }
        self.inner.backward_ran.set(true);

        // Iterative post-order DFS: children appear after parents, so the
        // reversed order visits each node before any of its parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.inner.id, ());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.inner.parents;
            if child_idx < parents.len() {
                let next = parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if next.requires_grad() && !seen.contains_key(&next.inner.id) {
                    seen.insert(next.inner.id, ());
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        self.accumulate_grad(&[1.0]);

        for node in order.iter().rev() {
            let Some(backward) = node.inner.backward.as_ref() else {
                continue;
            };
            let out_grad = node
                .inner
                .grad
                .borrow()
                .clone()
                .expect("graph node missed its upstream gradient");
            let out_data = node.inner.data.borrow();
            let parent_refs: Vec<std::cell::Ref<'_, Vec<f64>>> =
                node.inner.parents.iter().map(|p| p.inner.data.borrow()).collect();
            let parent_slices: Vec<&[f64]> = parent_refs.iter().map(|r| r.as_slice()).collect();
            let mut bufs: Vec<Vec<f64>> = node
                .inner
                .parents
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect();
            backward(BackwardArgs {
                out_data: &out_data,
                out_grad: &out_grad,
                parents: &parent_slices,
                grads: &mut bufs,
            });
            drop(parent_refs);
            drop(out_data);
            for (parent, buf) in node.inner.parents.iter().zip(bufs) {
                if parent.requires_grad() {
                    parent.accumulate_grad(&buf);
                }
            }
        }
        Ok(())
    }
}
