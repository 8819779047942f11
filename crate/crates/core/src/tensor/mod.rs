//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Every operation that has at least one gradient-tracking input records an
//! [`Op`] node pointing at its inputs. [`Tensor::backward`] walks that graph in
//! reverse topological order. Graphs are rebuilt on every forward pass and
//! dropped with the last handle to their output.

mod autograd;
mod gradcheck;
mod ops;
mod scalar;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{DeptError, Result};

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub(crate) use ops::Op;
pub use scalar::{Precision, Scalar};
pub(crate) use scalar::{gemm, MatMut, MatRef};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: AtomicBool,
    grad: Mutex<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases the same data.
pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.values();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(DeptError::Contract(format!(
            "tensor dimensions must be >= 1, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(DeptError::Contract(format!(
            "shape {shape:?} holds {numel} values but {len} were given"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad: AtomicBool::new(requires_grad),
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Result of an operation. The op is only recorded when an input tracks
    /// gradients, so inference graphs are never retained.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        let tracked = op.parents().iter().any(|p| p.requires_grad());
        if tracked {
            Self::from_parts(data, shape, true, Some(op))
        } else {
            Self::from_parts(data, shape, false, None)
        }
    }

    /// Constant leaf tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![value; n], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![value], vec![1], false, None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Read guard over the flat row-major values.
    pub fn values(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read_recursive()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(DeptError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.values()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.load(Ordering::Relaxed)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Toggle gradient tracking on a leaf. Disabling it also clears any grad.
    pub fn set_requires_grad(&self, flag: bool) -> Result<()> {
        if !self.is_leaf() {
            return Err(DeptError::Contract(
                "requires_grad can only be changed on leaf tensors".into(),
            ));
        }
        self.0.requires_grad.store(flag, Ordering::Relaxed);
        if !flag {
            self.zero_grad();
        }
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.lock().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Vec<T>) {
        let mut slot = self.0.grad.lock();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Copy of the values as a new constant leaf, cut from any graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Independent copy of a leaf, keeping its requires_grad flag but not its grad.
    pub fn deep_clone(&self) -> Self {
        Self::from_parts(self.to_vec(), self.0.shape.clone(), self.requires_grad(), None)
    }

    /// Mutate leaf values in place. Used by optimizers and weight loading.
    pub fn update(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(DeptError::Contract("only leaf tensors can be updated in place".into()));
        }
        f(&mut self.0.data.write());
        Ok(())
    }

    /// Overwrite leaf values with `values` (same length).
    pub fn assign(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(DeptError::shape("assign", self.shape(), &[values.len()]));
        }
        self.update(|d| d.copy_from_slice(values))
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.0.op.as_ref()
    }

    /// Convert to another precision as a constant leaf with the same flag.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.values().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::from_parts(data, self.0.shape.clone(), self.requires_grad() && self.is_leaf(), None)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.precision(), Precision::Standard32);
    }

    #[test]
    fn grad_toggle_only_on_leaves() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.mul(&a).unwrap();
        assert!(b.requires_grad());
        assert!(b.set_requires_grad(false).is_err());
        a.set_requires_grad(false).unwrap();
        assert!(!a.requires_grad());
        assert_eq!(a.precision(), Precision::Check64);
    }

    #[test]
    fn untracked_ops_drop_their_graph() {
        let a = Tensor::<f32>::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }
}
