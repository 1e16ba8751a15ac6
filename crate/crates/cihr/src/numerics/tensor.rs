//! Dense f64 tensors and the eager reverse-mode tape.
//!
//! Tensors are row-major, single-threaded handles (`Rc`-backed). A `Tape`
//! records one backward closure per executed op; `Tape::backward` replays
//! them in reverse to accumulate gradients into every reachable leaf that
//! has `requires_grad` set.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::NumericsError;

pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            values.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                values,
                requires_grad: false,
                grad: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Leaf parameter: requires_grad set from the start.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, values);
        t.set_requires_grad(true);
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.values.as_slice())
    }

    /// Scalar extraction; panics if not a single-element tensor.
    pub fn value(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.values.len(), 1, "value() on tensor of shape {:?}", d.shape);
        d.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, rg: bool) {
        self.inner.borrow_mut().requires_grad = rg;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite values in place (optimizer steps, finite differences).
    /// Length must match the existing buffer.
    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.values.len(), values.len());
        d.values.copy_from_slice(values);
    }

    pub fn with_values_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut d = self.inner.borrow_mut();
        f(&mut d.values)
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.inner.borrow_mut();
        let n = d.values.len();
        let grad = d.grad.get_or_insert_with(|| vec![0.0; n]);
        f(grad);
    }

    #[cfg(debug_assertions)]
    pub(crate) fn debug_check_finite(&self, op: &str) {
        let d = self.inner.borrow();
        for &v in &d.values {
            debug_assert!(v.is_finite(), "non-finite value {v} produced by {op}");
        }
    }
    #[cfg(not(debug_assertions))]
    pub(crate) fn debug_check_finite(&self, _op: &str) {}
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

type BackwardFn = Box<dyn FnOnce()>;

/// Eager Wengert tape: ops push their backward closure during the forward
/// pass; one `backward` call consumes the record in reverse order.
pub struct Tape {
    ops: RefCell<Vec<BackwardFn>>,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn record(&self, f: impl FnOnce() + 'static) {
        self.ops.borrow_mut().push(Box::new(f));
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Seeds d(loss)/d(loss) = `seed`
    /// (1.0 for a plain gradient; 1/batch when summing per-sample passes).
    pub fn backward_seeded(&self, loss: &Tensor, seed: f64) -> Result<(), NumericsError> {
        if loss.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        if self.consumed.get() {
            return Err(NumericsError::TapeConsumed);
        }
        self.consumed.set(true);
        loss.accumulate_grad(|g| g[0] += seed);
        let ops = std::mem::take(&mut *self.ops.borrow_mut());
        for op in ops.into_iter().rev() {
            op();
        }
        Ok(())
    }

    pub fn backward(&self, loss: &Tensor) -> Result<(), NumericsError> {
        self.backward_seeded(loss, 1.0)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Flat row-major index of a multi-dimensional coordinate.
pub fn flat_index(shape: &[usize], coord: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), coord.len());
    let mut idx = 0;
    for (&extent, &c) in shape.iter().zip(coord) {
        debug_assert!(c < extent);
        idx = idx * extent + c;
    }
    idx
}
