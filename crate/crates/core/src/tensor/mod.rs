//! N-dimensional arrays with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted row-major buffer. Operations
//! on tensors that require gradients record a backward closure together with
//! handles to their inputs, forming a graph that [`Tensor::backward`] walks in
//! reverse creation order.

mod ops;

pub use ops::{BinaryOp, Activation, Reduce};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Element type codes shared by every on-disk format in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating element types a differentiable tensor can hold.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
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

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct Recorded<E: Element> {
    op: &'static str,
    inputs: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    recorded: Option<Recorded<E>>,
}

/// Reference-counted tensor handle. Cloning is cheap and shares storage.
pub struct Tensor<E: Element>(Rc<Node<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &E::DTYPE.name())
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    pub fn scalar(v: E) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![E::zero(); numel(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    pub fn zeros_like(other: &Tensor<E>) -> Self {
        Self::zeros(other.shape())
    }

    pub fn from_f64s(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| E::from_f64_lossy(v)).collect(), shape)
    }

    fn leaf(data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            recorded: None,
        }))
    }

    /// Returns a fresh leaf sharing this tensor's values, with gradient
    /// tracking switched on or off. The new leaf has no recorded history.
    pub fn detach_with_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), requires_grad)
    }

    pub fn detach(&self) -> Self {
        self.detach_with_grad(false)
    }

    pub fn requires_grad_(self, on: bool) -> Self {
        if self.0.requires_grad == on && self.0.recorded.is_none() {
            return self;
        }
        self.detach_with_grad(on)
    }

    /// Builds the result of an operation, recording it when any input tracks
    /// gradients and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<E>],
        backward: impl Fn(&[E]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let recorded = track.then(|| Recorded {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: track,
            grad: RefCell::new(None),
            recorded,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn item(&self) -> E {
        self.0.data[0]
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.recorded.is_none()
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Self::leaf(g.clone(), self.0.shape.clone(), false))
    }

    pub fn grad_vec(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_storage(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Converts between float element types; the result is an untracked leaf.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::leaf(
            self.0.data.iter().map(|v| F::from_f64_lossy(v.to_f64_lossy())).collect(),
            self.0.shape.clone(),
            false,
        )
    }

    /// Recorded operations reachable from this tensor, in creation order.
    pub fn graph(&self) -> GradGraph {
        let nodes = self.reachable();
        GradGraph {
            nodes: nodes
                .iter()
                .map(|t| GraphNode {
                    id: t.id(),
                    op: t.0.recorded.as_ref().map_or("leaf", |r| r.op),
                    inputs: t
                        .0
                        .recorded
                        .as_ref()
                        .map(|r| r.inputs.iter().map(|i| i.id()).collect())
                        .unwrap_or_default(),
                })
                .collect(),
        }
    }

    fn reachable(&self) -> Vec<Tensor<E>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(rec) = &t.0.recorded {
                stack.extend(rec.inputs.iter().cloned());
            }
            out.push(t);
        }
        out.sort_by_key(|t| t.id());
        out
    }

    /// Back-propagates from a scalar, accumulating into the gradients of every
    /// reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.reachable();
        let mut pending: HashMap<u64, Vec<E>> = HashMap::new();
        pending.insert(self.id(), vec![E::one()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.recorded {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                        None => *slot = Some(grad),
                    }
                }
                Some(rec) => {
                    let input_grads = (rec.backward)(&grad);
                    debug_assert_eq!(input_grads.len(), rec.inputs.len());
                    for (input, g) in rec.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "grad size for {}", rec.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One recorded operation of a gradient graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub id: u64,
    pub op: &'static str,
    pub inputs: Vec<u64>,
}

/// Snapshot of the recorded graph behind a tensor, topologically ordered.
#[derive(Debug, Clone)]
pub struct GradGraph {
    pub nodes: Vec<GraphNode>,
}

impl GradGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node's inputs appear earlier in `nodes`.
    pub fn is_topological(&self) -> bool {
        let mut seen = HashSet::new();
        self.nodes.iter().all(|n| {
            let ok = n.inputs.iter().all(|i| seen.contains(i));
            seen.insert(n.id);
            ok
        })
    }
}
