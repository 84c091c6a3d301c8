//! Cholesky factorization for the small symmetric positive-definite
//! covariance matrices of the mixture model.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Number of times the diagonal jitter is doubled before giving up.
pub const CHOLESKY_RETRIES: usize = 3;

/// Base diagonal jitter for the retry path.
pub const DEFAULT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
    jitter: f64,
}

impl Cholesky {
    /// Plain factorization `s = L Lᵀ`; fails on any non-positive pivot.
    pub fn factor(s: &Matrix) -> Result<Self> {
        factor_shifted(s, 0.0)
            .map(|lower| Cholesky { lower, jitter: 0.0 })
            .ok_or(Error::NotPositiveDefinite { retries: 0 })
    }

    /// Factorizes `s`, retrying with `jitter·I`, `2·jitter·I`, `4·jitter·I`
    /// added to the diagonal when the plain factorization fails.
    pub fn factor_with_retries(s: &Matrix, jitter: f64) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::Shape {
                op: "cholesky",
                lhs: s.shape(),
                rhs: s.shape(),
            });
        }
        if let Some(lower) = factor_shifted(s, 0.0) {
            return Ok(Cholesky { lower, jitter: 0.0 });
        }
        let mut shift = jitter;
        for _ in 0..CHOLESKY_RETRIES {
            if let Some(lower) = factor_shifted(s, shift) {
                log::debug!("cholesky succeeded with diagonal jitter {shift:e}");
                return Ok(Cholesky { lower, jitter: shift });
            }
            shift *= 2.0;
        }
        Err(Error::NotPositiveDefinite {
            retries: CHOLESKY_RETRIES,
        })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn logdet(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.lower.get(i, i).ln())
            .sum::<f64>()
            * 2.0
    }

    /// Solves `L y = v` in place on each column of `v`.
    pub fn solve_lower_in_place(&self, v: &mut Matrix) {
        let n = self.dim();
        let cols = v.cols();
        let l = self.lower.data();
        let out = v.data_mut();
        for i in 0..n {
            for c in 0..cols {
                let mut acc = out[i * cols + c];
                for j in 0..i {
                    acc -= l[i * n + j] * out[j * cols + c];
                }
                out[i * cols + c] = acc / l[i * n + i];
            }
        }
    }

    fn solve_upper_in_place(&self, v: &mut Matrix) {
        let n = self.dim();
        let cols = v.cols();
        let l = self.lower.data();
        let out = v.data_mut();
        for i in (0..n).rev() {
            for c in 0..cols {
                let mut acc = out[i * cols + c];
                for j in i + 1..n {
                    acc -= l[j * n + i] * out[j * cols + c];
                }
                out[i * cols + c] = acc / l[i * n + i];
            }
        }
    }

    /// `s⁻¹ v` via two triangular solves.
    pub fn solve(&self, v: &Matrix) -> Result<Matrix> {
        if v.rows() != self.dim() {
            return Err(Error::Shape {
                op: "cholesky_solve",
                lhs: self.lower.shape(),
                rhs: v.shape(),
            });
        }
        let mut out = v.clone();
        self.solve_lower_in_place(&mut out);
        self.solve_upper_in_place(&mut out);
        Ok(out)
    }

    /// Squared Mahalanobis norm `vᵀ s⁻¹ v` of a single vector.
    pub fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let n = self.dim();
        let l = self.lower.data();
        let mut y = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let mut acc = v[i];
            for j in 0..i {
                acc -= l[i * n + j] * y[j];
            }
            y[i] = acc / l[i * n + i];
            total += y[i] * y[i];
        }
        total
    }
}

fn factor_shifted(s: &Matrix, shift: f64) -> Option<Matrix> {
    let n = s.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = s.get(i, j);
            if i == j {
                acc += shift;
            }
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(acc > 0.0) || !acc.is_finite() {
                    return None;
                }
                l.set(i, i, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Returns `log|s|` and `s⁻¹ v` without forming the inverse.
pub fn cholesky_logdet_solve(s: &Matrix, v: &Matrix) -> Result<(f64, Matrix)> {
    let chol = Cholesky::factor_with_retries(s, DEFAULT_JITTER)?;
    Ok((chol.logdet(), chol.solve(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_case() {
        let v = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (ld, x) = cholesky_logdet_solve(&Matrix::identity(3), &v).unwrap();
        assert_eq!(ld, 0.0);
        assert_eq!(x, v);
    }

    #[test]
    fn diagonal_case() {
        let d = [2.0, 0.5, 4.0];
        let v = Matrix::column(&[1.0, 1.0, 2.0]);
        let (ld, x) = cholesky_logdet_solve(&Matrix::diag(&d), &v).unwrap();
        let expected: f64 = d.iter().map(|v| v.ln()).sum();
        assert!((ld - expected).abs() < 1e-14);
        for i in 0..3 {
            assert!((x.get(i, 0) - v.get(i, 0) / d[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn retries_rescue_singular_matrix() {
        // rank one: plain factorization fails, jitter makes it PD
        let s = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(Cholesky::factor(&s).is_err());
        let c = Cholesky::factor_with_retries(&s, 1e-6).unwrap();
        assert!(c.jitter() > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let s = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky_logdet_solve(&s, &Matrix::column(&[1.0, 1.0])),
            Err(Error::NotPositiveDefinite { retries: 3 })
        ));
    }

    #[test]
    fn mahalanobis_matches_solve() {
        let s = Matrix::new(2, 2, vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let c = Cholesky::factor(&s).unwrap();
        let v = [0.7, -1.2];
        let x = c.solve(&Matrix::column(&v)).unwrap();
        let direct = v[0] * x.get(0, 0) + v[1] * x.get(1, 0);
        assert!((c.mahalanobis_sq(&v) - direct).abs() < 1e-14);
    }
}
