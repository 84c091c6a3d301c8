//! Mixture parameters from soft memberships, and per-sample energy.
//!
//! `φ_m = mean_i γ_im`, `μ_m = Σ_i γ_im z_i / Σ_i γ_im` and `Σ_m` the
//! γ-weighted covariance around `μ_m`, symmetrized and shifted by `ε·I`.
//! The energy of a sample is `−log Σ_m φ_m N(z; μ_m, Σ_m)`, evaluated in
//! log space through Cholesky factors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::linalg::{Cholesky, DEFAULT_JITTER};
use crate::numeric::{logsumexp, Matrix, Tape, Var};

/// Components whose total membership falls below this are degenerate.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmState {
    pub phi: Vec<f64>,
    /// One mean per row, `M x dim`.
    pub means: Matrix,
    pub covariances: Vec<Matrix>,
    pub epsilon: f64,
    pub degenerate: Vec<bool>,
}

/// Serializable mirror of [`GmmState`] used in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmSummary {
    pub phi: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl GmmState {
    pub fn components(&self) -> usize {
        self.phi.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn summary(&self) -> GmmSummary {
        GmmSummary {
            phi: self.phi.clone(),
            degenerate: self.degenerate.clone(),
        }
    }

    fn factors(&self) -> Result<Vec<Option<Cholesky>>> {
        self.covariances
            .iter()
            .enumerate()
            .map(|(m, cov)| {
                if self.degenerate[m] {
                    return Ok(None);
                }
                Cholesky::factor_with_retries(cov, DEFAULT_JITTER)
                    .map(Some)
                    .map_err(|_| Error::ComponentNotPositiveDefinite { component: m })
            })
            .collect()
    }

    /// Per-sample energy of the rows of `z`.
    pub fn energy(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.dim() {
            return Err(Error::Shape {
                op: "energy",
                lhs: z.shape(),
                rhs: self.means.shape(),
            });
        }
        let factors = self.factors()?;
        let log_norm = self.dim() as f64 * (2.0 * PI).ln();
        let consts: Vec<f64> = factors
            .iter()
            .zip(&self.phi)
            .map(|(f, phi)| match f {
                Some(c) => phi.ln() - 0.5 * (c.logdet() + log_norm),
                None => f64::NEG_INFINITY,
            })
            .collect();
        let mut centered = vec![0.0; self.dim()];
        let mut terms = vec![0.0; self.components()];
        Ok((0..z.rows())
            .map(|i| {
                for (m, f) in factors.iter().enumerate() {
                    terms[m] = match f {
                        Some(c) => {
                            for (d, v) in centered.iter_mut().enumerate() {
                                *v = z.get(i, d) - self.means.get(m, d);
                            }
                            consts[m] - 0.5 * c.mahalanobis_sq(&centered)
                        }
                        None => f64::NEG_INFINITY,
                    };
                }
                -logsumexp(&terms)
            })
            .collect())
    }
}

fn check_membership(z: &Matrix, gamma: &Matrix) -> Result<()> {
    if z.rows() != gamma.rows() || z.rows() == 0 {
        return Err(Error::Shape {
            op: "gmm_fit",
            lhs: z.shape(),
            rhs: gamma.shape(),
        });
    }
    Ok(())
}

fn finalize_cov(mut cov: Matrix, eps: f64) -> Matrix {
    let n = cov.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
        cov.set(i, i, cov.get(i, i) + eps);
    }
    cov
}

/// Single-pass weighted moments of `z` under memberships `gamma`.
pub fn gmm_fit(z: &Matrix, gamma: &Matrix, eps: f64) -> Result<GmmState> {
    let mut acc = GmmAccumulator::new(gamma.cols(), z.cols());
    acc.add(z, gamma)?;
    acc.finish(eps)
}

/// Streaming version of [`gmm_fit`]. Each chunk's centered moments are
/// merged with the pairwise update, so the result does not depend on how
/// the rows were split into chunks (up to rounding).
#[derive(Debug, Clone)]
pub struct GmmAccumulator {
    n: usize,
    mass: Vec<f64>,
    means: Vec<Vec<f64>>,
    scatter: Vec<Matrix>,
}

impl GmmAccumulator {
    pub fn new(components: usize, dim: usize) -> Self {
        GmmAccumulator {
            n: 0,
            mass: vec![0.0; components],
            means: vec![vec![0.0; dim]; components],
            scatter: vec![Matrix::zeros(dim, dim); components],
        }
    }

    pub fn rows_seen(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, z: &Matrix, gamma: &Matrix) -> Result<()> {
        check_membership(z, gamma)?;
        if gamma.cols() != self.mass.len() || z.cols() != self.means[0].len() {
            return Err(Error::Shape {
                op: "gmm_accumulate",
                lhs: z.shape(),
                rhs: gamma.shape(),
            });
        }
        let dim = z.cols();
        for m in 0..self.mass.len() {
            let wb: f64 = (0..z.rows()).map(|i| gamma.get(i, m)).sum();
            if wb <= 0.0 {
                continue;
            }
            let mut mb = vec![0.0; dim];
            for i in 0..z.rows() {
                let g = gamma.get(i, m);
                for (acc, v) in mb.iter_mut().zip(z.row(i)) {
                    *acc += g * v;
                }
            }
            mb.iter_mut().for_each(|v| *v /= wb);
            let mut sb = Matrix::zeros(dim, dim);
            let mut c = vec![0.0; dim];
            for i in 0..z.rows() {
                let g = gamma.get(i, m);
                for (d, v) in c.iter_mut().enumerate() {
                    *v = z.get(i, d) - mb[d];
                }
                for a in 0..dim {
                    let ga = g * c[a];
                    let row = sb.row_mut(a);
                    for b in 0..dim {
                        row[b] += ga * c[b];
                    }
                }
            }
            let wa = self.mass[m];
            let w = wa + wb;
            let delta: Vec<f64> = mb.iter().zip(&self.means[m]).map(|(b, a)| b - a).collect();
            let cross = wa * wb / w;
            let s = &mut self.scatter[m];
            s.add_assign(&sb);
            for a in 0..dim {
                for b in 0..dim {
                    let v = s.get(a, b) + cross * delta[a] * delta[b];
                    s.set(a, b, v);
                }
            }
            for (mean, d) in self.means[m].iter_mut().zip(&delta) {
                *mean += d * wb / w;
            }
            self.mass[m] = w;
        }
        self.n += z.rows();
        Ok(())
    }

    pub fn finish(&self, eps: f64) -> Result<GmmState> {
        if self.n == 0 {
            return Err(Error::Dataset("no rows accumulated for mixture fit".into()));
        }
        let (k, dim) = (self.mass.len(), self.means[0].len());
        let mut means = Matrix::zeros(k, dim);
        let mut covariances = Vec::with_capacity(k);
        let mut degenerate = Vec::with_capacity(k);
        for m in 0..k {
            if self.mass[m] < DEGENERATE_MASS {
                log::warn!("mixture component {m} is degenerate (mass {:e})", self.mass[m]);
                degenerate.push(true);
                covariances.push(Matrix::identity(dim).scale(eps));
                continue;
            }
            degenerate.push(false);
            means.row_mut(m).copy_from_slice(&self.means[m]);
            covariances.push(finalize_cov(self.scatter[m].scale(1.0 / self.mass[m]), eps));
        }
        Ok(GmmState {
            phi: self.mass.iter().map(|w| w / self.n as f64).collect(),
            means,
            covariances,
            epsilon: eps,
            degenerate,
        })
    }
}

/// Result of the differentiable mixture fit on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedGmm {
    /// `N x 1` per-sample energies.
    pub energy: Var,
    /// `1 x 1` sum over non-degenerate components of `Σ_d 1/(Σ_m)_dd`.
    pub cov_penalty: Var,
}

/// Fits the mixture on the tape and evaluates sample energies, keeping
/// every intermediate differentiable with respect to `z` and `gamma`.
pub fn gmm_energy_taped(tape: &mut Tape, z: Var, gamma: Var, eps: f64) -> Result<TapedGmm> {
    let (n, dim) = tape.value(z).shape();
    let k = tape.value(gamma).cols();
    if tape.value(gamma).rows() != n || n == 0 {
        return Err(Error::Shape {
            op: "gmm_energy",
            lhs: (n, dim),
            rhs: tape.value(gamma).shape(),
        });
    }
    let eps_eye = Matrix::identity(dim).scale(eps);
    let log_norm = dim as f64 * (2.0 * PI).ln();

    let mass = tape.col_sum(gamma);
    let phi = tape.scale(mass, 1.0 / n as f64);
    let log_phi = tape.ln(phi);

    let mut comps = Vec::with_capacity(k);
    let mut penalties = Vec::new();
    for m in 0..k {
        let g_m = tape.slice_cols(gamma, m, m + 1)?;
        let mass_m = tape.slice_cols(mass, m, m + 1)?;
        let log_phi_m = tape.slice_cols(log_phi, m, m + 1)?;
        let (centered, cov) = if tape.value(mass_m).item() < DEGENERATE_MASS {
            log::warn!("mixture component {m} is degenerate within batch");
            let cov = tape.constant(eps_eye.clone());
            (z, cov)
        } else {
            let weighted = tape.mul_col(z, g_m)?;
            let sum = tape.col_sum(weighted);
            let mean = tape.div_scalar(sum, mass_m)?;
            let neg_mean = tape.scale(mean, -1.0);
            let centered = tape.add_row(z, neg_mean)?;
            let wc = tape.mul_col(centered, g_m)?;
            let wct = tape.transpose(wc);
            let scatter = tape.matmul(wct, centered)?;
            let cov = tape.div_scalar(scatter, mass_m)?;
            let cov_t = tape.transpose(cov);
            let both = tape.add(cov, cov_t)?;
            let sym = tape.scale(both, 0.5);
            let cov = tape.shift(sym, &eps_eye)?;
            let diag = tape.diag(cov)?;
            let inv = tape.recip(diag);
            penalties.push(tape.sum(inv));
            (centered, cov)
        };
        let ct = tape.transpose(centered);
        let solved = tape.chol_solve(cov, ct)?;
        let solved_t = tape.transpose(solved);
        let prod = tape.mul(centered, solved_t)?;
        let quad = tape.row_sum(prod);
        let logdet = tape.logdet(cov)?;
        let norm = tape.scale(logdet, -0.5);
        let shift = tape.add(norm, log_phi_m)?;
        let shift = tape.shift(shift, &Matrix::scalar(-0.5 * log_norm))?;
        let half_quad = tape.scale(quad, -0.5);
        comps.push(tape.add_row(half_quad, shift)?);
    }
    let stacked = tape.concat_cols(&comps)?;
    let lse = tape.row_logsumexp(stacked);
    let energy = tape.scale(lse, -1.0);
    let cov_penalty = match penalties.split_first() {
        None => tape.constant(Matrix::scalar(0.0)),
        Some((first, rest)) => {
            let mut total = *first;
            for p in rest {
                total = tape.add(total, *p)?;
            }
            total
        }
    };
    Ok(TapedGmm {
        energy,
        cov_penalty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_single_component() {
        let z = Matrix::new(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let g = gmm_fit(&z, &Matrix::filled(1, 1, 1.0), 1e-6).unwrap();
        assert_eq!(g.phi, vec![1.0]);
        assert_eq!(g.means.row(0), z.row(0));
        assert!(g.covariances[0].max_abs_diff(&Matrix::identity(3).scale(1e-6)) < 1e-18);
    }

    #[test]
    fn standard_normal_at_origin() {
        let state = GmmState {
            phi: vec![1.0],
            means: Matrix::zeros(1, 2),
            covariances: vec![Matrix::identity(2)],
            epsilon: 0.0,
            degenerate: vec![false],
        };
        let e = state.energy(&Matrix::zeros(1, 2)).unwrap();
        assert!((e[0] - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((e[0] - 1.837877).abs() < 1e-6);
    }

    #[test]
    fn diagonal_covariance_at_mean() {
        let d = [0.5, 2.0, 3.0];
        let mu = [1.0, -1.0, 0.5];
        let state = GmmState {
            phi: vec![1.0],
            means: Matrix::new(1, 3, mu.to_vec()).unwrap(),
            covariances: vec![Matrix::diag(&d)],
            epsilon: 0.0,
            degenerate: vec![false],
        };
        let e = state.energy(&Matrix::new(1, 3, mu.to_vec()).unwrap()).unwrap();
        let expected: f64 = d.iter().map(|v| 0.5 * (2.0 * PI * v).ln()).sum();
        assert!((e[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_membership_gives_global_mean() {
        let z = Matrix::new(4, 2, vec![0.0, 1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 2.0]).unwrap();
        let g = gmm_fit(&z, &Matrix::filled(4, 3, 1.0 / 3.0), 1e-6).unwrap();
        for m in 0..3 {
            assert!((g.means.get(m, 0) - 1.25).abs() < 1e-12);
            assert!((g.means.get(m, 1) - 1.625).abs() < 1e-12);
            assert!((g.phi[m] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_component_is_flagged() {
        let z = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let gamma = Matrix::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let g = gmm_fit(&z, &gamma, 1e-6).unwrap();
        assert_eq!(g.degenerate, vec![false, true]);
        assert_eq!(g.means.get(1, 0), 0.0);
        let e = g.energy(&z).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn taped_energy_matches_plain() {
        let z = Matrix::new(
            5,
            2,
            vec![0.1, 0.4, -0.3, 0.8, 0.5, -0.2, 1.1, 0.3, -0.6, -0.9],
        )
        .unwrap();
        let gamma = Matrix::new(
            5,
            2,
            vec![0.9, 0.1, 0.6, 0.4, 0.3, 0.7, 0.5, 0.5, 0.2, 0.8],
        )
        .unwrap();
        let state = gmm_fit(&z, &gamma, 1e-6).unwrap();
        let plain = state.energy(&z).unwrap();
        let mut t = Tape::new();
        let zv = t.constant(z);
        let gv = t.constant(gamma);
        let out = gmm_energy_taped(&mut t, zv, gv, 1e-6).unwrap();
        for (i, e) in plain.iter().enumerate() {
            assert!((t.value(out.energy).get(i, 0) - e).abs() < 1e-10);
        }
        let pen: f64 = state
            .covariances
            .iter()
            .map(|c| (0..2).map(|d| 1.0 / c.get(d, d)).sum::<f64>())
            .sum();
        assert!((t.item(out.cov_penalty) - pen).abs() < 1e-8 * pen);
    }
}
