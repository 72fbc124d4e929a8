mod autograd;
mod gradcheck;
mod ops;

pub use autograd::{backward, no_grad, Tape};
pub use gradcheck::grad_check;
pub use ops::Activation;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Gradient accumulator attached to leaf tensors. Shared between a
/// `Parameter` and every tensor view it hands to the graph, so `backward`
/// lands gradients where the optimizer reads them.
pub struct GradSlot<T: Scalar> {
    grad: Mutex<Option<Vec<T>>>,
}

impl<T: Scalar> GradSlot<T> {
    pub fn new() -> Self {
        GradSlot {
            grad: Mutex::new(None),
        }
    }

    pub fn accumulate(&self, g: &[T]) {
        let mut slot = self.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn take(&self) -> Option<Vec<T>> {
        self.grad.lock().unwrap().take()
    }

    pub fn get(&self) -> Option<Vec<T>> {
        self.grad.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        *self.grad.lock().unwrap() = None;
    }
}

impl<T: Scalar> Default for GradSlot<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Backward function of one recorded operation: receives the adjoint of the
/// output and accumulates into the adjoint buffers of the parents (None for
/// parents outside the differentiated subgraph).
pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &mut [Option<Vec<T>>]) + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    pub parents: Vec<Tensor<T>>,
    pub backward: BackFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Node<T>>,
    grad_slot: Option<Arc<GradSlot<T>>>,
}

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// Values are immutable once created; cloning a tensor clones a handle, not
/// the buffer. Ops record backward closures when gradient mode is on and any
/// input is connected to a gradient leaf.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?} dtype={} grad={}",
            self.shape(),
            T::DTYPE,
            self.inner.grad_slot.is_some()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        Ok(Self::leaf(shape, data, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape, vec![T::ZERO; numel], None)
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape, vec![v; numel], None)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![1], vec![v], None)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<T>, slot: Option<Arc<GradSlot<T>>>) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                node: None,
                grad_slot: slot,
            }),
        }
    }

    pub(crate) fn leaf_shared(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        slot: Option<Arc<GradSlot<T>>>,
    ) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                node: None,
                grad_slot: slot,
            }),
        }
    }

    /// Result of an op: carries a backward edge when recording is active.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        back: impl Fn(&[T], &mut [Option<Vec<T>>]) + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record =
            autograd::grad_enabled() && parents.iter().any(|p| p.requires_lineage());
        let node = if record {
            Some(Node {
                parents,
                backward: Box::new(back),
            })
        } else {
            None
        };
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                node,
                grad_slot: None,
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
        self.inner.data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of {} elements",
                self.numel()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    /// Interpret as N×C×H×W.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(Error::dimension(format!("expected rank-4 tensor, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(Error::dimension(format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [a, b] => Ok((*a, *b)),
            s => Err(Error::dimension(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn grad_slot(&self) -> Option<&Arc<GradSlot<T>>> {
        self.inner.grad_slot.as_ref()
    }

    pub(crate) fn requires_lineage(&self) -> bool {
        self.inner.node.is_some() || self.inner.grad_slot.is_some()
    }

    /// New leaf sharing this tensor's values, with a gradient slot attached.
    pub fn requires_grad(&self) -> Tensor<T> {
        Self::leaf_shared(
            self.inner.shape.clone(),
            Arc::clone(&self.inner.data),
            Some(Arc::new(GradSlot::new())),
        )
    }

    /// New leaf sharing values, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::leaf_shared(self.inner.shape.clone(), Arc::clone(&self.inner.data), None)
    }

    /// Gradient accumulated into this tensor's slot by `backward`, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad_slot.as_ref().and_then(|s| s.get())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type (detached).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data().iter().map(|v| U::from_f64(v.to_f64())).collect();
        Tensor::leaf(self.shape().to_vec(), data, None)
    }
}
