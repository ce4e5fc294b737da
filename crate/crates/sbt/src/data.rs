//! Row-major design matrix and fit-time views.

use crate::error::{Error, Result};

/// Dense row-major matrix of covariates on the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    values: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl Matrix {
    pub fn new(values: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::Input(format!(
                "matrix storage has {} values, expected {}x{}",
                values.len(),
                n_rows,
                n_cols
            )));
        }
        Ok(Matrix { values, n_rows, n_cols })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::Input("ragged rows in matrix".into()));
            }
            values.extend_from_slice(row);
        }
        Matrix::new(values, n_rows, n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Borrowed view of one shard of a dataset: the full matrix plus the row
/// indices belonging to the shard. `y` is already centered by the fit.
#[derive(Copy, Clone)]
pub struct DataView<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
    pub idx: &'a [usize],
}

impl<'a> DataView<'a> {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn row(&self, local: usize) -> &'a [f64] {
        self.x.row(self.idx[local])
    }

    pub fn y_at(&self, local: usize) -> f64 {
        self.y[self.idx[local]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_access() {
        let m = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        assert_eq!(m.row(1), &[0.3, 0.4]);
        assert_eq!(m.n_rows(), 2);
        assert_eq!(m.n_cols(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Matrix::new(vec![1.0; 5], 2, 3).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn view_indexes_through() {
        let m = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let y = vec![5.0, 6.0, 7.0];
        let idx = vec![2, 0];
        let v = DataView { x: &m, y: &y, idx: &idx };
        assert_eq!(v.len(), 2);
        assert_eq!(v.row(0), &[2.0]);
        assert_eq!(v.y_at(1), 5.0);
    }
}
