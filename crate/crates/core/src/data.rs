//! Row-major feature matrices and the read-only views trees train on.

use crate::error::{DafError, Result};

/// Dense row-major `rows × cols` matrix of features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DafError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DafError::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Copies the given rows into a new matrix.
    pub fn select(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Column access used during tree growing and routing.
pub trait Features: Sync {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn value(&self, row: usize, feature: usize) -> f64;

    /// Copies feature `feature` of `rows` into `out`.
    fn gather(&self, feature: usize, rows: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.extend(rows.iter().map(|&r| self.value(r, feature)));
    }
}

impl Features for Matrix {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn dim(&self) -> usize {
        self.cols
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.data[row * self.cols + feature]
    }

    fn gather(&self, feature: usize, rows: &[usize], out: &mut Vec<f64>) {
        out.clear();
        out.extend(rows.iter().map(|&r| self.data[r * self.cols + feature]));
    }
}

/// Base features with per-row class vectors appended, without copying the
/// base rows.
#[derive(Debug, Clone, Copy)]
pub struct Augmented<'a> {
    base: &'a Matrix,
    extra: Option<&'a Matrix>,
}

impl<'a> Augmented<'a> {
    pub fn plain(base: &'a Matrix) -> Self {
        Augmented { base, extra: None }
    }

    pub fn new(base: &'a Matrix, extra: Option<&'a Matrix>) -> Self {
        if let Some(e) = extra {
            assert_eq!(e.rows(), base.rows(), "augmentation rows must match base rows");
        }
        Augmented { base, extra }
    }

    pub fn base(&self) -> &'a Matrix {
        self.base
    }

    pub fn extra(&self) -> Option<&'a Matrix> {
        self.extra
    }
}

impl Features for Augmented<'_> {
    fn n_rows(&self) -> usize {
        self.base.rows()
    }

    fn dim(&self) -> usize {
        self.base.cols() + self.extra.map_or(0, |e| e.cols())
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        let d = self.base.cols();
        if feature < d {
            self.base.value(row, feature)
        } else {
            self.extra
                .expect("feature index beyond base without augmentation")
                .value(row, feature - d)
        }
    }

    fn gather(&self, feature: usize, rows: &[usize], out: &mut Vec<f64>) {
        let d = self.base.cols();
        if feature < d {
            self.base.gather(feature, rows, out)
        } else {
            self.extra
                .expect("feature index beyond base without augmentation")
                .gather(feature - d, rows, out)
        }
    }
}

/// A single vector viewed as a one-row feature source.
#[derive(Debug, Clone, Copy)]
pub struct SingleRow<'a>(pub &'a [f64]);

impl Features for SingleRow<'_> {
    fn n_rows(&self) -> usize {
        1
    }

    fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    fn value(&self, _row: usize, feature: usize) -> f64 {
        self.0[feature]
    }
}
