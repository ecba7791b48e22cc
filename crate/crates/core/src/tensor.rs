//! Dense row-major tensors over f64.
//!
//! The flat layout is row-major: for shape `[a, b, c]` the element `(i, j, k)`
//! lives at `i*b*c + j*c + k`. Scalars use shape `[1]`.

use std::fmt;

/// Errors raised by tensor construction and the graph operations built on top.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands whose shapes cannot be combined by the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single operand with a shape the operation rejects.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// Data buffer length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// A shape extent of zero, or an empty input where one element is needed.
    Empty { op: &'static str },
    /// `backward` was asked to start from a non-scalar node.
    ScalarRequired { op: &'static str, shape: Vec<usize> },
    /// An index (token id, row, factor) outside its admissible range.
    OutOfRange {
        op: &'static str,
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// A replication or pooling factor that is zero or fails a divisibility
    /// requirement; `detail` names the offending dimensions.
    Factor {
        op: &'static str,
        factor: usize,
        detail: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::BadShape { op, shape, expected } => {
                write!(f, "{op}: shape {shape:?} rejected, expected {expected}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::Empty { op } => write!(f, "{op}: empty input"),
            TensorError::ScalarRequired { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            TensorError::OutOfRange { op, what, index, bound } => {
                write!(f, "{op}: {what} {index} out of range (bound {bound})")
            }
            TensorError::Factor { op, factor, detail } => {
                write!(f, "{op}: factor {factor} invalid, {detail}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense tensor: a shape and a row-major flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and the buffer
    /// length equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::BadShape {
                op: "tensor",
                shape,
                expected: "nonempty shape with positive extents".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength { expected: numel, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Row vector of shape `[n]`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Matrix of shape `[rows.len(), rows[0].len()]`; all rows must agree.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(TensorError::Empty { op: "matrix" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "matrix",
                    left: vec![rows.len(), cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data })
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extent along axis 0.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the extents after axis 0 (length of one "row").
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Element access for 2-D tensors.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// Same data reinterpreted under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute entry difference against another tensor of the same
    /// shape. Panics on shape disagreement; meant for tests and diagnostics.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape disagreement");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
