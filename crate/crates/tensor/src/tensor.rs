use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return shape_err("Tensor::new", format!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel]).expect("zeros: positive extents")
    }

    pub fn scalar(x: T) -> Self {
        Self::new(vec![1], vec![x]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Interprets the tensor as a matrix whose last extent is the column count.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().expect("finite")).expect("castable"))
                .collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        ensure_finite(&self.data, op)
    }
}

pub(crate) fn ensure_finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NumericInput { op })
    }
}
