//! Token-space matrices, timesteps, and the rowwise arithmetic shared by the
//! curvature, prediction, and skipping code.
//!
//! A [`TokenMatrix`] is a dense `N x d` row-major block: one row per token,
//! one column per channel. Values are validated finite on construction, so
//! every downstream division by a norm sees well-defined inputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct TokenMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!(
                "token matrix needs positive shape, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::length("matrix data", rows * cols, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::length("row", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Widens or narrows every element into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Result<TokenMatrix<U>> {
        TokenMatrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    pub fn ensure_shape(&self, expected: (usize, usize)) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(expected, self.shape()));
        }
        Ok(())
    }

    /// Euclidean norm of every row. Zero rows map to exactly zero.
    pub fn row_l2_norms(&self) -> Vec<T> {
        self.iter_rows().map(row_norm).collect()
    }

    /// Elementwise `self + s * other`.
    pub fn axpy(&self, other: &Self, s: T) -> Result<Self> {
        other.ensure_shape(self.shape())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + s * b)
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        other.ensure_shape(self.shape())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v * s).collect(),
        )
    }

    pub fn frobenius_norm(&self) -> T {
        row_norm(&self.data)
    }

    /// Euclidean norm of each row of `self - other`, without materialising the difference.
    pub fn row_distances(&self, other: &Self) -> Result<Vec<T>> {
        other.ensure_shape(self.shape())?;
        Ok(self
            .iter_rows()
            .zip(other.iter_rows())
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
                    .sqrt()
            })
            .collect())
    }

    /// Builds a matrix whose row `i` is taken from `pick(i)`, a source matrix of the same shape.
    pub(crate) fn gather_rows<'a>(
        shape: (usize, usize),
        mut pick: impl FnMut(usize) -> &'a [T],
    ) -> Result<Self>
    where
        T: 'a,
    {
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for i in 0..shape.0 {
            let row = pick(i);
            if row.len() != shape.1 {
                return Err(Error::length("row", shape.1, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(shape.0, shape.1, data)
    }
}

impl<T: fmt::Debug> fmt::Debug for TokenMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = &self.data[..self.data.len().min(8)];
        f.debug_struct("TokenMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("head", &head)
            .finish()
    }
}

/// Per-row Euclidean norm. Free function form of [`TokenMatrix::row_l2_norms`].
pub fn row_l2_norms<T: Scalar>(m: &TokenMatrix<T>) -> Vec<T> {
    m.row_l2_norms()
}

/// `a + s * b`, elementwise. Free function form of [`TokenMatrix::axpy`].
pub fn axpy_rows<T: Scalar>(
    a: &TokenMatrix<T>,
    b: &TokenMatrix<T>,
    s: T,
) -> Result<TokenMatrix<T>> {
    a.axpy(b, s)
}

#[inline]
fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}

/// One node of a denoising schedule: the scheduler time and its position in
/// the descending sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep<T> {
    pub value: T,
    pub index: usize,
}

impl<T: Scalar> Timestep<T> {
    pub fn new(value: T, index: usize) -> Self {
        Self { value, index }
    }
}

/// Validates that a schedule strictly decreases in value and increases in index.
pub fn check_schedule<T: Scalar>(timesteps: &[Timestep<T>]) -> Result<()> {
    for (i, pair) in timesteps.windows(2).enumerate() {
        if !(pair[1].value < pair[0].value) {
            return Err(Error::Ordering(format!(
                "timestep {} ({}) does not decrease from timestep {} ({})",
                i + 1,
                pair[1].value,
                i,
                pair[0].value
            )));
        }
        if pair[1].index <= pair[0].index {
            return Err(Error::Ordering(format!(
                "timestep index {} does not increase past {}",
                pair[1].index, pair[0].index
            )));
        }
    }
    Ok(())
}

/// Per-token modality label. Carried for reporting only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Other,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Rgb => 0,
            Modality::Depth => 1,
            Modality::Other => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Rgb),
            1 => Some(Modality::Depth),
            2 => Some(Modality::Other),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> TokenMatrix<f64> {
        TokenMatrix::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn row_norms_examples() {
        assert_eq!(row_l2_norms(&m(1, 2, &[3.0, 4.0])), vec![5.0]);
        assert_eq!(
            row_l2_norms(&TokenMatrix::<f64>::zeros(2, 3).unwrap()),
            vec![0.0, 0.0]
        );
        assert_eq!(row_l2_norms(&m(1, 3, &[1.0, 2.0, 2.0])), vec![3.0]);
    }

    #[test]
    fn axpy_examples() {
        let r = axpy_rows(&m(1, 2, &[1.0, 1.0]), &m(1, 2, &[2.0, 2.0]), 0.0).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 1.0]);
        let r = axpy_rows(&m(1, 2, &[0.0, 0.0]), &m(1, 2, &[1.0, 2.0]), 3.0).unwrap();
        assert_eq!(r.as_slice(), &[3.0, 6.0]);
        let r = axpy_rows(&m(1, 2, &[1.0, 2.0]), &m(1, 2, &[3.0, 4.0]), -1.0).unwrap();
        assert_eq!(r.as_slice(), &[-2.0, -2.0]);
    }

    #[test]
    fn axpy_shape_mismatch() {
        let err = axpy_rows(&m(1, 2, &[1.0, 1.0]), &m(2, 1, &[1.0, 1.0]), 1.0).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(matches!(
            TokenMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            TokenMatrix::new(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
        assert!(TokenMatrix::<f64>::new(2, 2, vec![1.0; 3]).is_err());
        assert!(TokenMatrix::<f64>::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn schedule_check() {
        let ok = [
            Timestep::new(2.0, 0),
            Timestep::new(1.0, 1),
            Timestep::new(0.0, 2),
        ];
        assert!(check_schedule(&ok).is_ok());
        let bad = [Timestep::new(2.0, 0), Timestep::new(2.0, 1)];
        assert!(matches!(check_schedule(&bad), Err(Error::Ordering(_))));
    }

    #[test]
    fn works_in_f32() {
        let a = TokenMatrix::<f32>::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.row_l2_norms(), vec![5.0f32]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn norms_scale_with_abs(vals in prop::collection::vec(-1e3f64..1e3, 12), s in -50.0f64..50.0) {
                let a = m(4, 3, &vals);
                let base = a.row_l2_norms();
                let scaled = a.scale(s).unwrap().row_l2_norms();
                for (b, sc) in base.iter().zip(&scaled) {
                    prop_assert!((sc - s.abs() * b).abs() <= 1e-12 * (1.0 + s.abs() * b));
                }
            }

            #[test]
            fn axpy_exact_for_unit_coefficients(
                a in prop::collection::vec(-1e6f64..1e6, 6),
                b in prop::collection::vec(-1e6f64..1e6, 6),
            ) {
                let (ma, mb) = (m(2, 3, &a), m(2, 3, &b));
                let same = ma.axpy(&mb, 0.0).unwrap();
                prop_assert_eq!(same.as_slice(), ma.as_slice());
                let plus = ma.axpy(&mb, 1.0).unwrap();
                let minus = ma.axpy(&mb, -1.0).unwrap();
                for i in 0..6 {
                    prop_assert_eq!(plus.as_slice()[i], a[i] + b[i]);
                    prop_assert_eq!(minus.as_slice()[i], a[i] - b[i]);
                }
            }
        }
    }
}
