//! Minimal dense row-major matrix used for feature batches and layer weights.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    /// Stacks equally sized rows; an empty input gives a `0 x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vstack column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        }
    }

    /// `self * w^T + b` for `w` of shape `out x in`.
    pub fn affine(&self, w: &Matrix, b: &[f64]) -> Matrix {
        assert_eq!(self.cols, w.cols, "affine input dimension");
        let mut out = Matrix::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = out.row_mut(i);
            for (k, ok) in o.iter_mut().enumerate() {
                *ok = dot(x, w.row(k)) + b[k];
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_computation() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]], 2);
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.5, -1.0], [0.0, 2.0]], 2);
        let y = x.affine(&w, &[0.0, 1.0, -1.0]);
        assert_eq!(y.row(0), &[1.0, -0.5, 3.0]);
        assert_eq!(y.row(1), &[3.0, -1.5, 7.0]);
    }

    #[test]
    fn select_and_stack() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]], 1);
        assert_eq!(x.select_rows(&[2, 0]).as_slice(), &[3.0, 1.0]);
        assert_eq!(x.vstack(&x).rows(), 6);
    }
}
