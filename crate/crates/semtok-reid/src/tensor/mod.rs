//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records itself into the computation graph
//! (an implicit gradient tape ordered by node creation). `backward` on a
//! scalar loss replays the reachable nodes in reverse creation order, so
//! gradient accumulation order is fixed and runs are bitwise reproducible.
//!
//! Tensors are cheap `Rc` handles; the graph lives as long as some handle
//! to its outputs does. Leaves created with `requires_grad = false` (for
//! example frozen decoder weights) are traversed by backward — their
//! consumers still receive gradients — but never accumulate a gradient of
//! their own.

mod catalogue;
mod gradcheck;
mod ops;

pub use catalogue::{primitive_catalogue, PrimitiveCase};
pub use gradcheck::{check_function, check_primitive_case, GradCheckOutcome, FD_STEP, FD_TOL};
pub(crate) use ops::Op;

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_SEQ: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node {
    /// Creation order; defines the tape order used by backward.
    seq: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    /// `None` for leaves.
    op: Option<Op>,
}

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        Tensor {
            node: Rc::new(Node {
                seq: NEXT_SEQ.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op: Some(op),
            }),
        }
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            node: Rc::new(Node {
                seq: NEXT_SEQ.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op: None,
            }),
        })
    }

    /// Constant leaf (no gradient).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape.to_vec(), false)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false).expect("scalar leaf")
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::constant(vec![0.0; shape.iter().product()], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    /// Number of rows of a 2-d tensor (or length of a 1-d one).
    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Mark or unmark a leaf as gradient-accumulating. Used by the freeze
    /// operation at model construction; interior nodes derive their flag
    /// from their inputs at creation and cannot be changed.
    pub fn set_requires_grad(&self, value: bool) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract(
                "requires_grad can only be toggled on leaf tensors".into(),
            ));
        }
        self.node.requires_grad.set(value);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's values (optimizer steps, finite-difference
    /// probes). Interior nodes are immutable.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("only leaf tensors can be mutated".into()));
        }
        f(self.node.data.borrow_mut().as_mut_slice());
        Ok(())
    }

    /// Copy of this tensor's values as a fresh constant leaf. Severs the
    /// gradient path: backward through the copy never reaches this tensor.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.node.shape.clone(), false).expect("detach leaf")
    }

    pub(crate) fn seq(&self) -> u64 {
        self.node.seq
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of interior nodes
    /// are reset and recomputed on every call; leaf gradients accumulate
    /// across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.op.is_none() || !self.requires_grad() {
            return Err(Error::Contract(
                "backward requires a loss recorded on the gradient tape".into(),
            ));
        }

        // Collect the cone of influence: ancestors that participate in the
        // gradient computation, keyed by creation order.
        let mut reachable: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() {
                continue;
            }
            if reachable.insert(t.seq(), t.clone()).is_none() {
                if let Some(op) = &t.node.op {
                    for input in op.inputs() {
                        stack.push(input.clone());
                    }
                }
            }
        }

        // Interior gradients belong to this sweep alone.
        for t in reachable.values() {
            if !t.is_leaf() {
                *t.node.grad.borrow_mut() = None;
            }
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);

        // Reverse tape order: every node's consumers are visited first.
        for t in reachable.values().rev() {
            let Some(op) = &t.node.op else { continue };
            let grad = t.node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            op.backward(t, &grad)?;
        }
        Ok(())
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_sum_gradient_is_ones() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn frozen_input_gets_no_grad_but_is_traversed() {
        // loss = x · w with w frozen: grad(x) = w, grad(w) absent.
        let x = Tensor::param(vec![2.0, -1.0], &[1, 2]).unwrap();
        let w = Tensor::constant(vec![3.0, 5.0], &[2, 1]).unwrap();
        let loss = x.matmul(&w).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 5.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = f(x) + f(x) must match 2·f(x) in value and gradient.
        let x = Tensor::param(vec![0.5, -0.25, 1.5], &[3]).unwrap();
        let f = x.gelu().unwrap().sum_all().unwrap();
        let y = f.add(&f).unwrap();
        y.backward().unwrap();
        let g_shared = x.grad().unwrap();

        x.zero_grad();
        let f2 = x.gelu().unwrap().sum_all().unwrap();
        let y2 = f2.mul_scalar(2.0).unwrap();
        assert!((y.item() - y2.item()).abs() < 1e-15);
        y2.backward().unwrap();
        let g_scaled = x.grad().unwrap();
        for (a, b) in g_shared.iter().zip(&g_scaled) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_is_bitwise_deterministic() {
        let x = Tensor::param(vec![0.3, 0.7, -0.2, 0.9], &[2, 2]).unwrap();
        let w = Tensor::param(vec![1.0, -0.5, 0.25, 2.0], &[2, 2]).unwrap();
        let loss = x
            .matmul(&w)
            .unwrap()
            .softmax(1)
            .unwrap()
            .sum_all()
            .unwrap();
        loss.backward().unwrap();
        let g1x = x.grad().unwrap();
        let g1w = w.grad().unwrap();
        x.zero_grad();
        w.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), g1x);
        assert_eq!(w.grad().unwrap(), g1w);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0).unwrap();
        let err = y.backward().unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn detach_severs_gradient_path() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.mul_scalar(3.0).unwrap().detach();
        assert!(!d.requires_grad());
        let y = d.mul_scalar(2.0).unwrap();
        assert!(!y.requires_grad());
    }
}
