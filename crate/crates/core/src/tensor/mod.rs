//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array plus an optional record
//! of the operation that produced it. Operations build a DAG as they run;
//! [`Tensor::backward`] walks it in reverse topological order and deposits
//! gradients on the leaf tensors that asked for them. Values are never
//! mutated after creation — only gradient buffers accumulate.
//!
//! The element type is generic over [`Scalar`] (f32 or f64); see the crate
//! docs for how the two precision modes are used.

mod elementwise;
mod linalg;
mod spatial;

pub use elementwise::concat_last;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Per-input gradient buffers returned by a backward closure, aligned with
/// the node's input list. `None` marks an input that takes no gradient.
type InputGrads<T> = Vec<Option<Vec<T>>>;

struct Node<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    backward: Box<dyn Fn(&[T]) -> InputGrads<T>>,
}

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// Dense n-dimensional array, cheap to clone (shared storage).
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.inner.id, self.inner.shape)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape/data length mismatch");
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor: never receives a gradient.
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during backward passes.
    pub fn leaf(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::new_inner(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_inner(shape.to_vec(), vec![T::ZERO; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_inner(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![], vec![value], false, None)
    }

    /// Internal constructor used by every operation.
    ///
    /// The node (and hence the backward closure) is only recorded when some
    /// input participates in a gradient computation; pure inference graphs
    /// carry no autodiff baggage.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> InputGrads<T> + 'static,
    ) -> Self {
        let tracked = inputs.iter().any(|t| t.tracks_grad());
        let node = if tracked {
            Some(Node { inputs, backward: Box::new(backward) })
        } else {
            None
        };
        Self::new_inner(shape, data, false, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.inner.data)
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    /// Gradient accumulated by the most recent backward passes, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detach from the graph: same data, no history, no gradient.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            inner: Rc::new(TensorInner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Arc::clone(&self.inner.data),
                grad: RefCell::new(None),
                requires_grad: false,
                node: None,
            }),
        }
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::dimension(
                "reshape",
                format!("cannot reshape {:?} ({} elems) to {:?}", self.shape(), self.numel(), shape),
            ));
        }
        let src = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![src],
            move |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reverse-mode pass from a scalar loss. Populates the `grad` buffer of
    /// every reachable gradient-requiring leaf, accumulating additively.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("seed must be scalar, got shape {:?}", self.shape()),
            ));
        }

        // Iterative post-order DFS; the graph is acyclic by construction.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    if input.tracks_grad() && !visited.contains(&input.inner.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.inner.id, vec![T::ONE]);

        for t in order.iter().rev() {
            let Some(grad_out) = grads.remove(&t.inner.id) else {
                continue;
            };
            if let Some(node) = &t.inner.node {
                let input_grads = (node.backward)(&grad_out);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.tracks_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "gradient length mismatch");
                    match grads.get_mut(&input.inner.id) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&ig) {
                                *a += *g;
                            }
                        }
                        None => {
                            grads.insert(input.inner.id, ig);
                        }
                    }
                }
            }
            if t.inner.requires_grad {
                let mut slot = t.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grad_out) {
                            *a += *g;
                        }
                    }
                    None => *slot = Some(grad_out),
                }
            }
        }
        Ok(())
    }
}

/// Named trainable tensor. Names are unique within a model and stable
/// across save/load (e.g. "decoder.sam3.w_q.weight").
#[derive(Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Parameter { name: name.into(), tensor: Tensor::leaf(shape, data)? })
    }

    /// Replace the value, keeping the name. Used by the optimizer; the old
    /// tensor (and any graph hanging off it) is dropped by the caller.
    pub fn set_data(&mut self, data: Vec<T>) {
        let shape = self.tensor.shape().to_vec();
        self.tensor = Tensor::leaf(&shape, data).expect("parameter update preserves shape");
    }
}

/// Uniform init on [-s, s] with s = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| T::from_f64(rng.gen_range(-s..=s)))
        .collect();
    Tensor::new_inner(shape.to_vec(), data, true, None)
}

/// Normal init via Box-Muller, sampled in f64 for mode-independent draws.
pub fn normal_init<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n = numel(shape);
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::from_f64(std * r * theta.cos()));
        if data.len() < n {
            data.push(T::from_f64(std * r * theta.sin()));
        }
    }
    Tensor::new_inner(shape.to_vec(), data, true, None)
}

/// Max relative error between the analytic gradient of `f` at `point` and
/// central finite differences with the given step.
///
/// `f` must be scalar-valued and smooth in a neighbourhood of `point`; call
/// this in f64 mode, steps around 1e-5.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    point: &[T],
    shape: &[usize],
    step: f64,
) -> Result<f64> {
    let x = Tensor::leaf(shape, point.to_vec())?;
    let y = f(&x)?;
    if y.numel() != 1 {
        return Err(Error::contract("grad_check", "function must be scalar-valued"));
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![T::ZERO; x.numel()]);

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] = T::from_f64(plus[i].to_f64() + step);
        minus[i] = T::from_f64(minus[i].to_f64() - step);
        let fp = f(&Tensor::constant(shape, plus)?)?.item().to_f64();
        let fm = f(&Tensor::constant(shape, minus)?)?.item().to_f64();
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
