//! Dense tensors with a dynamically recorded reverse-mode graph.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to an immutable node. Operations on
//! tensors that require gradients record a backward closure together with
//! their inputs; [`Tensor::backward`] walks the recorded graph in reverse
//! creation order. Leaves accumulate gradients across calls until
//! [`Tensor::zero_grad`] is invoked.
//!
//! Node ids are allocated from a monotonically increasing per-thread counter,
//! so every input of a node has a smaller id than the node itself and a
//! descending-id sweep is a valid reverse topological order.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Scalar;
use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Arguments handed to a backward closure.
pub(crate) struct BackwardArgs<'a, F: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [F],
    /// This node's forward value.
    pub out: &'a [F],
    pub inputs: &'a [Tensor<F>],
    /// Whether each input needs a gradient.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<F> = Box<dyn Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>>>;

struct GradFn<F: Scalar> {
    inputs: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    grad: RefCell<Option<Vec<F>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

pub struct Tensor<F: Scalar>(Rc<Node<F>>);

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "rank {} exceeds the supported maximum of {MAX_RANK} (shape {shape:?})",
            shape.len()
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Dimension(format!("shape {shape:?} holds {n} values but {len} were supplied")));
    }
    Ok(())
}

/// Keeps freed tensor buffers inside the heap. glibc otherwise serves large
/// blocks with fresh mappings and pays page faults on every allocation.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

impl<F: Scalar> Tensor<F> {
    fn leaf(data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Self {
        tune_allocator();
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
        }))
    }

    /// A constant tensor (no gradient).
    pub fn new(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<F>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| F::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(vec![F::zero(); n], shape).expect("zeros shape")
    }

    pub fn scalar(v: F) -> Self {
        Self::leaf(vec![v], vec![], false)
    }

    /// Builds an operation output, recording the graph edge when recording is
    /// enabled and at least one input requires a gradient.
    pub(crate) fn from_op(
        data: Vec<F>,
        shape: Vec<usize>,
        inputs: &[&Tensor<F>],
        backward: impl Fn(&BackwardArgs<'_, F>) -> Vec<Option<Vec<F>>> + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            grad_fn: Some(GradFn {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            }),
        }))
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

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn same_node(&self, other: &Tensor<F>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> F {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    /// In-place mutation of a leaf's values (optimizer updates, finite
    /// differences). Graphs recorded earlier keep referencing the new values.
    pub fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        assert!(self.is_leaf(), "only leaf tensors may be mutated in place");
        self.0.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<F>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A new constant leaf holding a copy of this tensor's values.
    pub fn detach(&self) -> Tensor<F> {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
        }
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Every reachable leaf with `requires_grad` receives `d self / d leaf`
    /// added to its gradient buffer. Intermediate gradients are released as
    /// soon as they have been propagated.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("backward on a tensor that does not depend on any parameter".into()));
        }

        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.id(), ()).is_some() {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && !seen.contains_key(&inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<F>> = HashMap::new();
        pending.insert(self.id(), vec![F::one()]);
        for node in &order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.inputs.iter().map(|t| t.requires_grad()).collect();
                    let out = node.0.data.borrow();
                    let grads = (gf.backward)(&BackwardArgs { grad: &g, out: &out, inputs: &gf.inputs, needs: &needs });
                    debug_assert_eq!(grads.len(), gf.inputs.len());
                    for (inp, ig) in gf.inputs.iter().zip(grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel());
                        match pending.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).is_ok());
        assert!(Tensor::<f32>::new(vec![1.0; 32], &[2, 2, 2, 2, 2]).is_err());
    }

    #[test]
    fn no_grad_disables_recording() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| p.scale(3.0));
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
        let z = p.scale(3.0);
        assert!(z.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = p.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = p.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        let p = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let a = p.scale(2.0);
        let loss = a.add(&a).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![4.0]);
    }
}
