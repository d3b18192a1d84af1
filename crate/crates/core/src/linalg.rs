//! Small dense solvers shared by the probe and the law fitter.

use crate::error::{Error, Result};
use crate::mae::Matrix;

/// Solves `a * x = b` for symmetric positive-definite `a` by Cholesky
/// factorization. `b` may have several right-hand-side columns.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::domain(format!(
            "solve_spd shapes: a {}x{}, b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                // relative pivot floor: rank-deficient systems fail loudly
                // instead of returning garbage from a 1e-17 pivot
                if s <= 1e-12 * a.data[i * n + i].abs().max(f64::MIN_POSITIVE) {
                    return Err(Error::Numeric(format!(
                        "normal matrix is singular or indefinite at pivot {i}; use a ridge penalty > 0"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut x = b.clone();
    let m = b.cols;
    for c in 0..m {
        for i in 0..n {
            let mut s = x.data[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x.data[k * m + c];
            }
            x.data[i * m + c] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x.data[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x.data[k * m + c];
            }
            x.data[i * m + c] = s / l[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 4.0]]);
        let x = solve_spd(&a, &b).unwrap();
        // a * x == b
        for r in 0..2 {
            for c in 0..2 {
                let v: f64 = (0..2).map(|k| a.data[r * 2 + k] * x.data[k * 2 + c]).sum();
                assert!((v - b.data[r * 2 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_reports_ridge_hint() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let err = solve_spd(&a, &Matrix::zeros(2, 1)).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
    }
}
