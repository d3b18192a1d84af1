//! Row-major f64 matrices and the dense kernels the model needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means (mean over rows).
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        out
    }
}

/// `x[r x i] * w[i x o] + b[o]`.
pub(crate) fn affine(x: &Matrix, w: &[f64], b: &[f64], out_dim: usize) -> Matrix {
    let in_dim = x.cols;
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(b.len(), out_dim);
    let mut y = Matrix::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let yr = y.row_mut(r);
        yr.copy_from_slice(b);
        for (k, &xv) in x.row(r).iter().enumerate() {
            let wr = &w[k * out_dim..(k + 1) * out_dim];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Backward of [`affine`]: accumulates into `dw`, `db`, returns `dx`.
pub(crate) fn affine_backward(
    x: &Matrix,
    w: &[f64],
    dy: &Matrix,
    dw: &mut [f64],
    db: &mut [f64],
) -> Matrix {
    let (in_dim, out_dim) = (x.cols, dy.cols);
    let mut dx = Matrix::zeros(x.rows, in_dim);
    for r in 0..x.rows {
        let dyr = dy.row(r);
        for (d, g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
        let xr = x.row(r);
        let dxr = dx.row_mut(r);
        for k in 0..in_dim {
            let wr = &w[k * out_dim..(k + 1) * out_dim];
            let dwr = &mut dw[k * out_dim..(k + 1) * out_dim];
            let xv = xr[k];
            let mut acc = 0.0;
            for j in 0..out_dim {
                acc += dyr[j] * wr[j];
                dwr[j] += xv * dyr[j];
            }
            dxr[k] = acc;
        }
    }
    dx
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, NormCache) {
    let d = x.cols as f64;
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let hr = xhat.row_mut(r);
        for (h, v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for j in 0..x.cols {
            yr[j] = gamma[j] * xhat.data[r * x.cols + j] + beta[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dy: &Matrix,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let cols = dy.cols;
    let d = cols as f64;
    let mut dx = Matrix::zeros(dy.rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let hr = cache.xhat.row(r);
        for j in 0..cols {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - hr[j] * mean_dh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
