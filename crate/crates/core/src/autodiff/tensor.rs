use super::AutodiffError;

/// Dense row-major `f64` array with an optional gradient buffer.
///
/// Tensors hold learnable parameters and data between iterations. A [`Tape`]
/// copies their values when they are bound and writes gradients back after
/// `backward`.
///
/// [`Tape`]: super::Tape
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::InvalidShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a learnable parameter.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), AutodiffError> {
        if grad.len() != self.values.len() {
            return Err(AutodiffError::InvalidShape {
                shape: self.shape.clone(),
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row width when viewed as a matrix (product of trailing dimensions).
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.values[i * w..(i + 1) * w]
    }

    /// Appends one row along the leading dimension. Drops any stored gradient.
    pub fn push_row(&mut self, row: &[f64]) -> Result<(), AutodiffError> {
        if self.shape.is_empty() || row.len() != self.row_len() {
            return Err(AutodiffError::InvalidShape {
                shape: self.shape.clone(),
                len: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        self.shape[0] += 1;
        self.grad = None;
        Ok(())
    }

    /// Keeps rows whose flag is `true`. Drops any stored gradient.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.rows(), "row mask length");
        let w = self.row_len();
        let mut out = Vec::with_capacity(self.values.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.extend_from_slice(&self.values[i * w..(i + 1) * w]);
            }
        }
        self.shape[0] = keep.iter().filter(|k| **k).count();
        self.values = out;
        self.grad = None;
    }
}
