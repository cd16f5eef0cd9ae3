//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major `Vec`-backed tensors, a
//! dynamically built DAG of operation nodes, and a reverse-topological
//! backward sweep. Everything the backbone and diffusion head need is
//! expressed against this surface; there is no accelerator path.
//!
//! Tensors are reference-counted handles. A graph is confined to one
//! thread; parameters are mutated only by the optimizer, between steps.

mod ops;

pub use ops::{masked_attention, MASK_NEG};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a tensor: f64 in verification mode, f32 in training mode.
pub trait Scalar: num_traits::Float + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;
    const BYTE_WIDTH: usize;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
    backward_done: Cell<bool>,
}

/// Row-major dense tensor handle; cloning is cheap (shared node).
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::constant(shape, data))
    }

    pub fn from_f64_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(shape, data.into_iter().map(T::from_f64).collect())
    }

    pub(crate) fn constant(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward_fn: None,
            backward_done: Cell::new(false),
        }))
    }

    /// A leaf parameter tracked by the optimizer.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward_fn: None,
            backward_done: Cell::new(false),
        })))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward_fn: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            backward_fn: Some(backward_fn),
            backward_done: Cell::new(false),
        }))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![T::zero(); n])
    }

    pub fn zeros_param(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::param(shape, vec![T::zero(); n]).unwrap()
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(vec![1], vec![T::from_f64(x)])
    }

    /// Gaussian init scaled by `std`, as a leaf parameter.
    pub fn randn_param<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Self::param(shape, data).unwrap()
    }

    /// Gaussian noise as a constant (no gradient).
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z)
            })
            .collect();
        Self::constant(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            1 => 1,
            2 => self.0.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.0.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            1 => self.0.shape[0],
            2 => self.0.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.0.shape.len()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|&x| Scalar::to_f64(x)).collect()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0].to_f64()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
        self.0.backward_done.set(false);
    }

    /// Replace the underlying data in place (optimizer use only).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data: expected {} elements, got {}",
                self.numel(),
                data.len()
            )));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Copy of this tensor's values detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.0.shape.clone(), self.0.data.borrow().clone())
    }

    /// Same values, different element type; detached.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| U::from_f64(Scalar::to_f64(x)))
            .collect();
        Tensor::constant(self.0.shape.clone(), data)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b = *b + x;
                }
            }
            None => {
                *slot = Some(g.to_vec());
            }
        }
    }

    /// Reverse-mode sweep from a scalar root. Errors if called twice on the
    /// same forward graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward() root must be scalar, shape is {:?}",
                self.0.shape
            )));
        }
        if self.0.backward_done.get() {
            return Err(Error::Autograd(
                "backward() called twice without a fresh forward".into(),
            ));
        }
        self.0.backward_done.set(true);
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(f) = &node.0.backward_fn {
                let g = node.0.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph; reversing it yields
    /// exact reverse topological order.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative DFS: (node, next child index).
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child_idx)) = stack.pop() {
            let mut pushed = false;
            for i in child_idx..node.0.parents.len() {
                let p = &node.0.parents[i];
                if p.0.requires_grad && !visited.contains(&p.0.id) {
                    visited.insert(p.0.id);
                    stack.push((node.clone(), i + 1));
                    stack.push((p.clone(), 0));
                    pushed = true;
                    break;
                }
            }
            if !pushed {
                order.push(node);
            }
        }
        order
    }
}
