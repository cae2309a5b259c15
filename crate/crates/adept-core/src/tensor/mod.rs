//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records its inputs and a backward rule;
//! calling [`Tensor::backward`] on a scalar loss walks the recorded graph in
//! reverse topological order and accumulates gradients into every tensor that
//! requires them. Gradients accumulate across repeated backward calls until
//! [`Tensor::zero_grad`] is called.

mod kernels;
mod ops;

pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    InvalidShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Context handed to a backward rule: the forward output, the gradient
/// flowing into it, and the operation's inputs.
pub(crate) struct BackwardCtx<'a> {
    pub out_data: &'a [f64],
    pub out_grad: &'a [f64],
    pub parents: &'a [Tensor],
}

/// Per-parent gradient contributions; `None` marks a non-differentiable slot.
type BackwardRule = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardRule>,
}

/// Handle to a node in the gradient graph. Cloning is cheap and aliases the
/// same storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor {
            node: Rc::new(node),
        }
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: shape.to_vec(),
            requires_grad,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant leaf: participates in forward math, never receives gradients.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape, false)
    }

    /// Trainable leaf: `backward` populates its `grad`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape, false).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(vec![value; numel(shape)], shape, false).expect("consistent by construction")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[], value)
    }

    /// Internal op constructor. `requires_grad` is inherited from the parents;
    /// the backward rule is dropped when no parent needs gradients.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardRule,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            requires_grad,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            parents,
            backward,
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Copy of the underlying buffer, row-major.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        let data = self.node.data.borrow();
        assert_eq!(data.len(), 1, "value() requires a single-element tensor");
        data[0]
    }

    /// Overwrite the buffer in place (optimizer steps, finite differences).
    /// The graph structure is untouched.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut cur = self.node.data.borrow_mut();
        if data.len() != cur.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: self.node.shape.clone(),
            });
        }
        cur.copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Constant copy that shares no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), &self.node.shape, false).expect("consistent by construction")
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are accumulated into
    /// every tensor with `requires_grad` reachable from `self`; repeated calls
    /// without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if numel(&self.node.shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.node.shape.clone(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }

        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);

        for tensor in order.iter().rev() {
            let node = &tensor.node;
            let rule = match &node.backward {
                Some(rule) => rule,
                None => continue,
            };
            // Interior grads are transient: consume them so only leaves
            // accumulate across repeated backward calls.
            let out_grad = match node.grad.borrow_mut().take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = {
                let out_data = node.data.borrow();
                let ctx = BackwardCtx {
                    out_data: &out_data,
                    out_grad: &out_grad,
                    parents: &node.parents,
                };
                rule(&ctx)
            };
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (parent, contribution) in node.parents.iter().zip(contributions) {
                if let Some(c) = contribution {
                    if parent.requires_grad() {
                        debug_assert_eq!(c.len(), parent.len());
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over the grad-requiring subgraph: every
    /// node's parents precede it in the returned list.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, parents_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.node.id) {
                continue;
            }
            let parents = tensor.node.parents.clone();
            stack.push((tensor, true));
            for parent in parents {
                if parent.requires_grad() && !visited.contains(&parent.node.id) {
                    stack.push((parent, false));
                }
            }
        }
        order
    }
}

/// In-place SGD-with-momentum update: `velocity = momentum * velocity + grad;
/// param -= lr * velocity`. The velocity buffer is caller-owned state.
pub fn sgd_momentum_step(
    param: &Tensor,
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.len() != param.len() {
        return Err(TensorError::LengthMismatch {
            len: grad.len(),
            shape: param.shape().to_vec(),
        });
    }
    let mut data = param.node.data.borrow_mut();
    for ((v, g), p) in velocity.iter_mut().zip(grad).zip(data.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_and_data_agree() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0]);
        assert!(Tensor::new(vec![1.0], &[3]).is_err());
    }

    #[test]
    fn backward_linear_case() {
        // loss = sum(x) -> grad = ones
        let x = Tensor::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_case() {
        // loss = sum(x*x)/2 -> grad = x
        let x = Tensor::param(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum().scale(0.5);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.relu();
        assert!(matches!(
            y.backward(),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constant_path_gets_no_grad() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let loss = x.mul(&c).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.relu().detach();
        assert!(!d.requires_grad());
        let loss = d.sum();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        // loss = sum(x + x) -> grad = 2
        let x = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        let loss = x.add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut v = vec![0.0];
        sgd_momentum_step(&p, &[0.5], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(v, vec![0.5]);
        assert_eq!(p.to_vec(), vec![1.0 - 0.05]);
        sgd_momentum_step(&p, &[0.5], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] - (0.9 * 0.5 + 0.5)).abs() < 1e-15);
    }
}
