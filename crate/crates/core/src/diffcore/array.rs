//! Dense multi-dimensional array participating in reverse-mode differentiation.

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
///
/// `data.len()` always equals the product of `shape`. When a gradient buffer
/// is present it has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(DiffArray {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        DiffArray {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        DiffArray {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Column vector of length `m`, shape `[m]`.
    pub fn vector(data: Vec<f64>) -> Self {
        DiffArray {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major matrix from nested rows. All rows must share a length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows in matrix literal".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        DiffArray::new(vec![r, c], data)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Install a fully computed gradient buffer, replacing any previous one.
    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// [`DiffArray::check_finite`] over the gradient buffer, if present.
    pub(crate) fn check_grad_finite(&self, context: &str) -> Result<()> {
        match &self.grad {
            Some(g) => finite_scan(g, context),
            None => Ok(()),
        }
    }

    /// Number of rows when viewed as `[rows, last_dim]`; 1-D arrays are one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        finite_scan(&self.data, context)
    }
}

/// Error if any element is NaN or infinite. The hot all-finite path is a
/// branch-free integer scan (a non-finite f64 has an all-ones exponent), so
/// it vectorizes; only a failed scan pays to locate the offending element.
fn finite_scan(data: &[f64], context: &str) -> Result<()> {
    const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;
    let mut any_bad = 0u64;
    for v in data {
        any_bad |= u64::from(v.to_bits() & EXP_MASK == EXP_MASK);
    }
    if any_bad != 0 {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{context}: element {bad} is {}",
                data[bad]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = DiffArray::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn rows_and_last_dim() {
        let a = DiffArray::zeros(vec![4, 3]);
        assert_eq!(a.rows(), 4);
        assert_eq!(a.last_dim(), 3);
        let v = DiffArray::vector(vec![1.0, 2.0]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.last_dim(), 2);
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut a = DiffArray::zeros(vec![2]);
        a.data_mut()[1] = f64::NAN;
        assert!(matches!(a.check_finite("test"), Err(Error::Numeric(_))));
    }
}
