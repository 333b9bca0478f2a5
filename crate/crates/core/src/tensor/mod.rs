//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to an n-dimensional
//! row-major buffer plus an optional gradient slot. Operations record the
//! producing [`Op`] on their output so that [`Tensor::backward`] can walk the
//! graph in reverse topological order. Gradients of leaf tensors accumulate
//! across backward calls until [`Tensor::zero_grad`] is called; gradients of
//! intermediate nodes are transient to each backward pass.

mod ops;

pub use ops::conv_output_dim;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// The operation that produced a tensor, holding handles to its inputs and
/// whatever forward-pass state the backward pass needs.
pub(crate) enum Op<T: Scalar> {
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Tensor<T>,
        /// Per output element, the argmax index within its (sample, channel) plane.
        argmax: Vec<u32>,
    },
    Relu {
        input: Tensor<T>,
    },
    Sigmoid {
        input: Tensor<T>,
    },
    Dropout {
        input: Tensor<T>,
        /// Scaled keep mask: 0 or 1/(1-p) per element.
        mask: Vec<T>,
    },
    Linear {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Reshape {
        input: Tensor<T>,
    },
    BceLoss {
        pred: Tensor<T>,
        target: Tensor<T>,
        clamp_eps: T,
    },
    Sum {
        input: Tensor<T>,
    },
    WeightedSum {
        input: Tensor<T>,
        weights: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Conv2d { input, weight, bias, .. } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::MaxPool2d { input, .. } => vec![input.clone()],
            Op::Relu { input } => vec![input.clone()],
            Op::Sigmoid { input } => vec![input.clone()],
            Op::Dropout { input, .. } => vec![input.clone()],
            Op::Linear { input, weight, bias } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::Reshape { input } => vec![input.clone()],
            // Targets are constants; gradient only flows to predictions.
            Op::BceLoss { pred, .. } => vec![pred.clone()],
            Op::Sum { input } => vec![input.clone()],
            Op::WeightedSum { input, .. } => vec![input.clone()],
        }
    }
}

pub(crate) struct TensorInner<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) dims: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<T>>,
}

/// Dense n-dimensional array with an optional gradient slot.
pub struct Tensor<T: Scalar> {
    pub(crate) inner: Rc<RefCell<TensorInner<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(f, "Tensor(id={}, dims={:?}, requires_grad={})", inner.id, inner.dims, inner.requires_grad)
    }
}

impl<T: Scalar> Tensor<T> {
    /// Create a tensor from a dims/data pair. `product(dims)` must equal
    /// `data.len()` and every dim must be positive.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in {:?}", dims)));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, data has {}",
                dims, numel, data.len()
            )));
        }
        Ok(Self::from_parts(dims, data, false, None))
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![T::zero(); numel], false, None)
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                dims,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    /// Mark this (leaf) tensor as a gradient target.
    pub fn requires_grad(self, yes: bool) -> Self {
        self.inner.borrow_mut().requires_grad = yes;
        self
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn dims(&self) -> Vec<usize> {
        self.inner.borrow().dims.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::contract(format!("item() on tensor of {} elements", inner.data.len())));
        }
        Ok(inner.data[0])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Run `f` over the raw data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Overwrite the data in place, keeping dims. Used by checkpoint loading
    /// and best-weights restoration.
    pub fn set_data(&self, values: &[T]) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if values.len() != inner.data.len() {
            return Err(Error::shape(format!(
                "set_data: expected {} elements, got {}",
                inner.data.len(),
                values.len()
            )));
        }
        inner.data.copy_from_slice(values);
        Ok(())
    }

    /// Gradient accumulated so far, if any backward pass touched this tensor.
    pub fn grad_to_vec(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Gradient, or zeros when the tensor never participated in a backward pass.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        let inner = self.inner.borrow();
        inner.grad.clone().unwrap_or_else(|| vec![T::zero(); inner.data.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached copy: same dims and data, no graph history, no grad.
    pub fn detached(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Self::from_parts(inner.dims.clone(), inner.data.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Every leaf tensor with
    /// `requires_grad` reachable from `self` gets `d(loss)/d(leaf)` *added*
    /// into its grad slot.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::contract(format!(
                    "backward requires a scalar loss, got dims {:?}",
                    inner.dims
                )));
            }
            if inner.op.is_none() && !inner.requires_grad {
                return Err(Error::contract(
                    "backward on a tensor with no gradient-tracked inputs",
                ));
            }
        }

        let order = self.topo_order();
        // Transient gradient buffers keyed by tensor id; entries are dropped
        // as soon as a node has pushed its gradient to its parents so the
        // live set stays at the frontier of the sweep.
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let node_grad = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue, // unreachable from the loss through grad-requiring paths
            };
            let inner = node.inner.borrow();
            if let Some(op) = &inner.op {
                ops::backward_op(op, &inner.data, &node_grad, &mut grads);
            }
            if inner.op.is_none() && inner.requires_grad {
                drop(inner);
                let mut inner = node.inner.borrow_mut();
                match &mut inner.grad {
                    Some(g) => {
                        for (gi, ni) in g.iter_mut().zip(node_grad.iter()) {
                            *gi += *ni;
                        }
                    }
                    None => inner.grad = Some(node_grad),
                }
            }
        }
        Ok(())
    }

    /// Iterative post-order DFS over the op graph.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let id = node.id();
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            let parents = node.inner.borrow().op.as_ref().map(|op| op.parents()).unwrap_or_default();
            stack.push((node, true));
            for p in parents {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }
}

/// Add `contribution` into the transient grad buffer for `tensor`.
pub(crate) fn accumulate<T: Scalar>(grads: &mut HashMap<u64, Vec<T>>, tensor: &Tensor<T>, contribution: Vec<T>) {
    let inner = tensor.inner.borrow();
    // Skip nodes that can never route gradient anywhere.
    if !inner.requires_grad && inner.op.is_none() {
        return;
    }
    debug_assert_eq!(contribution.len(), inner.data.len());
    match grads.entry(inner.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (gi, ci) in e.get_mut().iter_mut().zip(contribution.iter()) {
                *gi += *ci;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

/// True when an op involving these operands must be recorded on the output.
pub(crate) fn any_requires_grad<T: Scalar>(operands: &[&Tensor<T>]) -> bool {
    operands.iter().any(|t| {
        let inner = t.inner.borrow();
        inner.requires_grad || inner.op.is_some()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_dims() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]).requires_grad(true);
        let y = x.relu();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::<f64>::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0])
            .unwrap()
            .requires_grad(true);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad_to_vec().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn disconnected_parameter_gets_no_grad() {
        let x = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true);
        let q = Tensor::<f64>::new(vec![2], vec![5.0, 6.0]).unwrap().requires_grad(true);
        let loss = x.sum();
        loss.backward().unwrap();
        assert!(q.grad_to_vec().is_none());
        assert_eq!(q.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad(true);
        let loss = x.sum();
        loss.backward().unwrap();
        let g1 = x.grad_to_vec().unwrap();
        loss.backward().unwrap();
        let g2 = x.grad_to_vec().unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(*b, 2.0 * *a);
        }
        x.zero_grad();
        assert!(x.grad_to_vec().is_none());
    }
}
