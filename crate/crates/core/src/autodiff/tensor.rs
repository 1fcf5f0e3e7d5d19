use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("shape and buffer agree")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("shape and buffer agree")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Element-wise conversion to another scalar type; gradients are dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
