//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! Values are flat row-major `f32` buffers behind `Rc`, so cloning a tensor
//! is cheap and tensors without graph nodes are plain immutable values. A
//! [`Graph`] records operations define-by-run; the tape is rebuilt every
//! step and dropped after the backward pass, while the tensors it produced
//! remain valid as values. Reductions and finite-difference checks
//! accumulate in f64; storage stays f32.

mod custom;
mod gradcheck;
mod graph;
mod kernels;

pub use custom::{custom_op_id, register_custom, CustomOpId};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{grid_coord, Graph, NodeId};

use std::rc::Rc;

/// Dense n-dimensional f32 array, optionally attached to a graph node.
#[derive(Clone, Debug)]
pub struct Tensor {
    data: Rc<Vec<f32>>,
    shape: Vec<usize>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { data: Rc::new(data), shape: shape.to_vec(), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![value; numel], shape)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![value], &[1])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new((0..numel).map(f).collect(), shape)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same value, no graph node: gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), shape: self.shape.clone(), node: None }
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(data: Rc<Vec<f32>>, shape: Vec<usize>, node: Option<NodeId>) -> Self {
        Tensor { data, shape, node }
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f32>> {
        Rc::clone(&self.data)
    }

    /// Reinterprets the buffer under a new shape (no graph node).
    pub fn reshaped_value(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { data: Rc::clone(&self.data), shape: shape.to_vec(), node: None }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_drops_node_but_shares_data() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]);
        let d = t.detach();
        assert!(d.node().is_none());
        assert_eq!(d.data(), t.data());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![1.0, 2.0, 3.0], &[2]);
    }
}
