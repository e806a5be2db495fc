use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{AutogradError, Result};

/// Dense row-major f64 array with an optional gradient buffer.
///
/// A `Tensor` is a cheap handle: clones share the same storage. Values and
/// gradient live in separate cells so a backward closure can read one
/// tensor's values while accumulating into its gradient.
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<Vec<usize>>,
    values: Rc<RefCell<Vec<f64>>>,
    grad: Rc<RefCell<Option<Vec<f64>>>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || values.len() != numel {
            return Err(AutogradError::ShapeMismatch {
                op: "tensor",
                details: format!(
                    "shape {:?} requires {} values, got {}",
                    shape,
                    numel,
                    values.len()
                ),
            });
        }
        Ok(Tensor {
            shape: Rc::new(shape),
            values: Rc::new(RefCell::new(values)),
            grad: Rc::new(RefCell::new(None)),
            requires_grad: false,
        })
    }

    /// Trainable leaf: identical to `from_vec` but flagged for gradients.
    pub fn parameter(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::from_vec(shape, values)?.requiring_grad())
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).expect("scalar: consistent by construction")
    }

    /// Fills a fresh tensor from U(lo, hi), flagged trainable.
    pub fn uniform<R: rand::Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::parameter(shape, values).expect("uniform: consistent by construction")
    }

    pub fn requiring_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row/column view of the shape: 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shapes are nonempty")
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.values.borrow()[0]
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.values.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.borrow().clone()
    }

    /// Overwrites values in place; length must match.
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values: length mismatch");
        v.copy_from_slice(values);
    }

    pub fn apply_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.values.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        assert_eq!(buf.len(), delta.len(), "accumulate_grad: length mismatch");
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// Mutable access to the gradient buffer (allocated zeroed on demand).
    pub fn grad_mut<Rt>(&self, f: impl FnOnce(&mut [f64]) -> Rt) -> Rt {
        let mut g = self.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf)
    }

    /// Identity: two handles are the same tensor iff they share storage.
    pub fn same_storage(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.values, &b.values)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.values.borrow();
        let head: Vec<f64> = v.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("values", &head)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let t = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[0.5, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.5]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clones_share_storage() {
        let a = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let b = a.clone();
        b.set_values(&[4.0]);
        assert_eq!(a.item(), 4.0);
        assert!(Tensor::same_storage(&a, &b));
    }
}
