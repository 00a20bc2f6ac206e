use num_complex::Complex64;

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    /// Builds an array, rejecting length mismatches and non-finite entries.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {i} of array with shape {shape:?} is {}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional array from a slice.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Element at a multi-dimensional index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }
}

/// Dense row-major array of complex `f64` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexArray {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexArray {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Complex64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite(format!(
                "element {i} of complex array with shape {shape:?} is {}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, Complex64::new(0.0, 0.0))
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: Complex64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, index: &[usize]) -> Complex64 {
        self.data[flat_index(&self.shape, index)]
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &n)| {
        assert!(i < n, "index {i} out of bounds for axis of length {n}");
        acc * n + i
    })
}

/// A real or complex array, as stored on the tape and in parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Real(RealArray),
    Complex(ComplexArray),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(a) => a.shape(),
            Value::Complex(a) => a.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Value::Real(a) => a.len(),
            Value::Complex(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complex(&self) -> bool {
        matches!(self, Value::Complex(_))
    }

    pub fn as_real(&self) -> Option<&RealArray> {
        match self {
            Value::Real(a) => Some(a),
            Value::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&ComplexArray> {
        match self {
            Value::Complex(a) => Some(a),
            Value::Real(_) => None,
        }
    }

    pub fn zeros_like(&self) -> Value {
        match self {
            Value::Real(a) => Value::Real(RealArray::zeros(a.shape().to_vec())),
            Value::Complex(a) => Value::Complex(ComplexArray::zeros(a.shape().to_vec())),
        }
    }

    /// Number of independent real scalars (complex entries count twice).
    pub fn scalar_count(&self) -> usize {
        match self {
            Value::Real(a) => a.len(),
            Value::Complex(a) => 2 * a.len(),
        }
    }

    /// Real components in storage order; complex entries yield `re` then `im`.
    pub fn components(&self) -> Vec<f64> {
        match self {
            Value::Real(a) => a.data().to_vec(),
            Value::Complex(a) => a.data().iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    /// Overwrites the real components from a flat slice in `components` order.
    pub fn set_components(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::invalid(format!(
                "expected {} components, got {}",
                self.scalar_count(),
                values.len()
            )));
        }
        match self {
            Value::Real(a) => a.data_mut().copy_from_slice(values),
            Value::Complex(a) => {
                for (z, pair) in a.data_mut().iter_mut().zip(values.chunks_exact(2)) {
                    *z = Complex64::new(pair[0], pair[1]);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (Value::Complex(a), Value::Complex(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            _ => panic!("add_assign between real and complex values"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Value::Real(a) => a.data().iter().all(|v| v.is_finite()),
            Value::Complex(a) => a.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        }
    }
}

impl From<RealArray> for Value {
    fn from(a: RealArray) -> Self {
        Value::Real(a)
    }
}

impl From<ComplexArray> for Value {
    fn from(a: ComplexArray) -> Self {
        Value::Complex(a)
    }
}
