//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, row-major array. Every operation that touches
//! a tensor with `requires_grad` records a node holding its parents and a
//! backward closure; calling [`Tensor::backward`] on a scalar walks the
//! recorded [`Tape`] in reverse and returns a [`GradStore`] for the leaves.
//!
//! Spatial tensors are channel-first `(C, H, W)` throughout.

mod binary;
mod layers;
mod linalg;
mod nn;
mod param;
mod reduce;
mod segment;
mod shape;
mod spatial;

pub use layers::{Depthwise, LayerNorm, Linear, Pointwise, LN_EPS};
pub use param::{Bound, Param, ParamId, ParamStore};
pub use spatial::{ConvMode, PoolKind};

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Storage precision. Arithmetic runs in f64; `F32` tensors round every
/// produced value to the nearest f32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

/// Backward closure: `(output data, output grad, parent needs grad) -> parent grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.0.dtype)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(TensorError::Argument(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        let data = data.into_iter().map(|v| dtype.round(v)).collect();
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            dtype,
            requires_grad: false,
            node: None,
        })))
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data, DType::F64)
    }

    pub fn scalar(v: f64, dtype: DType) -> Tensor {
        Tensor::new(&[1], vec![v], dtype).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)], dtype).expect("valid zeros")
    }

    pub fn full(shape: &[usize], v: f64, dtype: DType) -> Tensor {
        Tensor::new(shape, vec![v; numel(shape)], dtype).expect("valid fill")
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Tensor> {
        let t = Tensor::new(shape, data, dtype)?;
        Ok(t.requires_grad_())
    }

    /// Returns a fresh leaf sharing this tensor's values with grad enabled.
    pub fn requires_grad_(self) -> Tensor {
        let (shape, data, dtype) = match Rc::try_unwrap(self.0) {
            Ok(inner) => (inner.shape, inner.data, inner.dtype),
            Err(rc) => (rc.shape.clone(), rc.data.clone(), rc.dtype),
        };
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            dtype,
            requires_grad: true,
            node: None,
        }))
    }

    /// Copy of the values cut off from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            dtype: self.0.dtype,
            requires_grad: false,
            node: None,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }
    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.0.data
    }
    pub fn dtype(&self) -> DType {
        self.0.dtype
    }
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }
    pub fn numel(&self) -> usize {
        self.0.data.len()
    }
    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }
    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Argument(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Records an operation result. Used by every op in this module.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let dtype = parents
            .iter()
            .map(|p| p.dtype())
            .reduce(DType::promote)
            .unwrap_or(DType::F64);
        if dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Box::new(backward),
        });
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            dtype,
            requires_grad,
            node,
        })))
    }

    /// Operations reachable from this tensor in execution order.
    pub fn tape(&self) -> Tape {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        // ids grow monotonically, so ascending id order is a topological order
        nodes.sort_by_key(|t| t.id());
        Tape { tensors: nodes }
    }

    /// Reverse pass from a scalar. The recorded graph is released when the
    /// returned tape walk finishes and the caller drops its tensors.
    pub fn backward(&self) -> Result<GradStore> {
        if self.numel() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = self.tape();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut leaves: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in tape.tensors.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                leaves.insert(t.id(), grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
            let grads = (node.backward)(t.data(), &grad, &needs);
            debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
            for (p, g) in node.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), p.numel(), "{}", node.op);
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), g);
                    }
                }
            }
        }
        Ok(GradStore { grads: leaves })
    }
}

/// Recorded operations in topological order.
pub struct Tape {
    tensors: Vec<Tensor>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `(tensor id, op name, parent ids)`; leaves report op `"leaf"`.
    pub fn entries(&self) -> Vec<(usize, &'static str, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|t| match &t.0.node {
                Some(n) => (t.id(), n.op, n.parents.iter().map(Tensor::id).collect()),
                None => (t.id(), "leaf", Vec::new()),
            })
            .collect()
    }
}

/// Gradients of grad-enabled leaves.
#[derive(Default)]
pub struct GradStore {
    grads: HashMap<usize, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient of `t`, zeros if the loss does not reach it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
