//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every operation that touches a tracked tensor records a recipe: the op
//! kind plus handles to the input tensors. `backward` walks the recorded
//! graph once in reverse topological order and accumulates vector-Jacobian
//! products into gradients; `replay` re-executes the recorded forward pass
//! and must reproduce the stored values bit for bit.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod check;
mod ops;

pub use check::{
    grad_check, grad_check_corrupted, op_gradient_sweep, Corruption, GradCheckEntry,
    GradCheckReport, OpSweepRow, DEFAULT_STEP,
};
pub use ops::concat;
pub(crate) use ops::Op;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NumericOverflow { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor has no recorded graph to differentiate")]
    DetachedTensor,
    #[error("loss is not deterministic: {first} vs {second} at the same point")]
    NonDeterministicLoss { first: f64, second: f64 },
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// How a derived tensor was produced: op kind plus the exact inputs.
pub(crate) struct Recipe {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    recipe: Option<Recipe>,
}

/// Shared handle to one tensor value; clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn validate(shape: &[usize], data: &[f64], op: &'static str) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("zero-sized dimension in {:?}", shape),
        });
    }
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NumericOverflow { op });
    }
    Ok(())
}

impl Tensor {
    /// Constant leaf; excluded from gradients.
    pub fn literal(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        validate(&shape, &data, "literal")?;
        Ok(Tensor::make(shape, data, false, None))
    }

    /// Trainable leaf; `backward` accumulates its gradient.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        validate(&shape, &data, "param")?;
        Ok(Tensor::make(shape, data, true, None))
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::literal(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        Tensor::literal(vec![data.len()], data)
    }

    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        recipe: Option<Recipe>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                recipe,
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
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn is_scalar(&self) -> bool {
        self.inner.shape.is_empty()
    }

    /// Value of a scalar tensor. Panics on any other shape.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.inner.shape);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Participates in gradient recording, either as a trainable leaf or as
    /// a value derived from one.
    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.recipe.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Copy of the value as an untracked constant leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Overwrite a leaf's values in place. Any graph recorded before the
    /// write still replays against the new values, so update leaves only
    /// between graph builds.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        assert!(self.inner.recipe.is_none(), "cannot overwrite a derived tensor");
        if values.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NumericOverflow { op: "set_data" });
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Add `delta` to one coordinate of a leaf (finite-difference probing).
    pub fn nudge(&self, index: usize, delta: f64) {
        assert!(self.inner.recipe.is_none(), "cannot nudge a derived tensor");
        self.inner.data.borrow_mut()[index] += delta;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reachable subgraph in topological order (inputs before users).
    fn topo_order(&self) -> Vec<Tensor> {
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Visit::Enter(self.clone())];
        let mut seen = HashSet::new();
        let mut order = Vec::new();
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    if let Some(r) = &t.inner.recipe {
                        for input in &r.inputs {
                            if !seen.contains(&input.id()) {
                                stack.push(Visit::Enter(input.clone()));
                            }
                        }
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        order
    }

    /// Propagate d(self)/d(leaf) into every tracked tensor of the recorded
    /// graph. Gradients accumulate additively, both across multiple uses of
    /// a leaf inside one graph and across repeated calls.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(TensorError::NotScalar { shape: self.inner.shape.clone() });
        }
        if !self.is_tracked() {
            return Err(TensorError::DetachedTensor);
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(recipe) = &t.inner.recipe else { continue };
            let upstream = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let grads = ops::backward_op(&recipe.op, &recipe.inputs, t, &upstream);
            for (input, g) in recipe.inputs.iter().zip(grads) {
                if let (Some(g), true) = (g, input.is_tracked()) {
                    input.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Recompute this tensor from the recorded graph's leaves through the
    /// same kernels that produced it. The result must equal `data()` bit
    /// for bit as long as no leaf was mutated in between.
    pub fn replay(&self) -> Result<Vec<f64>> {
        let order = self.topo_order();
        let mut values: HashMap<u64, Vec<f64>> = HashMap::new();
        for t in &order {
            let data = match &t.inner.recipe {
                None => t.to_vec(),
                Some(r) => {
                    let views: Vec<(&[usize], &[f64])> = r
                        .inputs
                        .iter()
                        .map(|i| (i.shape(), values[&i.id()].as_slice()))
                        .collect();
                    ops::eval_op(&r.op, &views)?.1
                }
            };
            values.insert(t.id(), data);
        }
        Ok(values.remove(&self.id()).expect("root visited last"))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let head: Vec<f64> = data.iter().take(4).copied().collect();
        let ellipsis = if data.len() > 4 { ", .." } else { "" };
        write!(
            f,
            "Tensor(id={}, shape={:?}, data={:?}{})",
            self.inner.id, self.inner.shape, head, ellipsis
        )
    }
}
