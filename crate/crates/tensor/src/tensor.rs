use crate::error::{shape_err, Result, TensorError};
use crate::Scalar;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return shape_err("tensor", format!("zero dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel], requires_grad: false }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: (0..numel).map(&mut f).collect(), requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of the tensor viewed as a matrix whose last axis is the column axis.
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [] => 1,
            [_] => 1,
            s => s[..s.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
