use std::cell::RefCell;

use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

/// Records the backward step of every primitive executed during a forward
/// pass, in execution order. `backward` replays the records in reverse,
/// accumulating into each reachable tensor's gradient buffer.
///
/// One tape covers one forward pass; build a fresh tape per training step.
/// Leaf gradients persist across tapes until cleared, so separate backward
/// passes over separate tapes accumulate.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<Box<dyn Fn()>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub(crate) fn record(&self, step: impl Fn() + 'static) {
        self.records.borrow_mut().push(Box::new(step));
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the recorded steps:
    /// a second call on the same tape propagates nothing.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(AutogradError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        loss.accumulate_grad(&[1.0]);
        let records = self.records.take();
        for step in records.iter().rev() {
            step();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let y = ops::sigmoid(&tape, &x);
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, AutogradError::NonScalarLoss { .. }));
    }

    #[test]
    fn square_gradient() {
        // loss = w^2 at w = 3 -> dloss/dw = 6
        let tape = Tape::new();
        let w = Tensor::parameter(vec![1], vec![3.0]).unwrap();
        let loss = ops::mul(&tape, &w, &w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sum_of_concat_gradient_is_ones() {
        let tape = Tape::new();
        let a = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::parameter(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let cat = ops::concat_last(&tape, &[&a, &b]).unwrap();
        let loss = ops::sum(&tape, &cat);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grads_accumulate_across_tapes() {
        let w = Tensor::parameter(vec![1], vec![2.0]).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = ops::mul(&tape, &w, &w).unwrap();
            tape.backward(&loss).unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![8.0]);
    }
}
