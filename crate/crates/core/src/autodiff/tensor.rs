use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
///
/// A tensor with an empty shape is a scalar holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        validate(&shape, &values, "tensor_new")?;
        Ok(Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
        })
    }

    /// Skips validation; callers guarantee `numel(shape) == values.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n], requires_grad)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. The shape is fixed.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub(crate) fn validate(shape: &[usize], values: &[f64], op: &'static str) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("dimensions must be positive, got {shape:?}")));
    }
    if numel(shape) != values.len() {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {} values, got {}", numel(shape), values.len()),
        ));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(op, format!("value at {i} is not finite")));
    }
    Ok(())
}
