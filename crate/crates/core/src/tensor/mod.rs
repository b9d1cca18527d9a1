//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Every op whose
//! inputs include a tensor with `requires_grad` records its inputs and the
//! values its backward rule needs; [`Tensor::backward`] walks the resulting
//! DAG in reverse topological order and accumulates gradients at fan-in.
//! Graphs are freed when the last handle to the root is dropped.

mod gemm;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::{forward_op, OpKind};
pub(crate) use gemm::{gemm, gemm_view, View};

pub(crate) struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

pub(crate) struct GradFn {
    inputs: Vec<Tensor>,
    op: ops::Saved,
}

/// Shared handle to one node of a computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that collects a gradient during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        })))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], &[], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new((0..numel(shape)).map(f).collect(), shape)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, inputs: Vec<Tensor>, op: ops::Saved) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then_some(GradFn { inputs, op });
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn,
        }))
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a recorded op.
    pub fn has_grad_fn(&self) -> bool {
        self.0.grad_fn.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf; intermediate results keep none.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), &self.0.shape, false).expect("shape already valid")
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a single-element root.
    ///
    /// Leaf gradients are added to any gradient already stored, so two
    /// sweeps over different roots sum their contributions.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward root has no ancestor that requires grad".into(),
            ));
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::with_capacity(order.len());
        grads.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            if let Some(grad_fn) = &node.0.grad_fn {
                let input_grads = grad_fn.op.backward(node, &grad_fn.inputs, &g);
                for (input, ig) in grad_fn.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    match grads.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(input.key(), ig);
                        }
                    }
                }
            }
            if node.0.grad_fn.is_some() {
                continue;
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes requiring grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(grad_fn) = &node.0.grad_fn {
                for input in grad_fn.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
