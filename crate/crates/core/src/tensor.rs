//! Dense row-major matrices and the few kernels shared by the plain simulator
//! and the differentiable graph.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Row-major dense matrix. Vectors are `n x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return arg(format!("matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `W x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return arg(format!("matvec: matrix has {} columns, vector has {}", self.cols, x.len()));
        }
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `out = W x`, skipping zero entries of `x` (spike vectors are mostly zero).
///
/// Sums run in column order so the plain simulator and the graph agree bit for bit.
pub(crate) fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    let active: Vec<usize> = (0..cols).filter(|&j| x[j] != 0.0).collect();
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for &j in &active {
            acc += row[j] * x[j];
        }
        *o = acc;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pearson correlation coefficient. Returns 0 if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_dense_sum() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.matvec(&[1.0, 0.0, 2.0]).unwrap(), vec![7.0, 16.0]);
        assert!(w.matvec(&[1.0]).is_err());
    }

    #[test]
    fn pearson_of_affine_map_is_one() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
    }
}
