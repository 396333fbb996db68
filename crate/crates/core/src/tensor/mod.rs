//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! All layout is row-major. Volumetric tensors use `[N, C, D, H, W]`.

mod conv;
mod graph;
mod kernels;

pub use conv::ConvSpec;
pub use graph::{BatchNormMode, BatchNormState, Graph, Var};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Parameter updates write through here; the shape never changes.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of {} values",
                grad.len(),
                self.data.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Interprets the tensor as `[N, C, D, H, W]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, d, h, w] => Ok([n, c, d, h, w]),
            _ => Err(shape_err!(
                "expected a 5-d [N, C, D, H, W] tensor, got {:?}",
                self.shape
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
