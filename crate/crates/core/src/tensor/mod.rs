//! Dense 4-D tensors and a small tape-based reverse-mode differentiation engine.
//!
//! Every value in the pipeline is a [`Tensor4D`] laid out row-major as
//! `(batch, channel, height, width)`. A [`Graph`] records primitive
//! applications in topological order; [`Graph::backward`] replays them in
//! reverse and fills the gradient slot of every node that influenced the loss.

mod gemm;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{sgd_step, OptimState};
pub use params::{Init, ParamStore};

use crate::error::{Error, Result};

pub type Shape4 = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4D {
    shape: Shape4,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4D {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("from_vec", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub(crate) fn grad_mut_or_zero(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Flat offset of `(n, c, y, x)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((n * cc + c) * hh + y) * ww + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Single image `n` as a `(1, c, h, w)` tensor without gradient.
    pub fn batch_item(&self, n: usize) -> Tensor4D {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Tensor4D {
            shape: [1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
            grad: None,
        }
    }
}
