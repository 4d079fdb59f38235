//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
///
/// `requires_grad` only matters when the tensor is placed on a
/// [`Graph`](crate::autodiff::Graph) through [`Graph::input`](crate::autodiff::Graph::input).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {numel} elements but buffer has {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Scalars are stored with shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new([n], data)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 1.0)
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Tensor::new(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        low: f64,
        high: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(low..high)).collect();
        Tensor::new(shape, data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    /// Sub-tensor along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return Err(Error::shape(
                "index_axis0",
                format!("index {i} out of range for shape {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor::from_parts(
            self.shape[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("expected {:?}, got {:?}", first.shape, t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Bitwise equality of shape and payload (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
