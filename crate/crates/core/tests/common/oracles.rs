use cadgmm::model::GmmState;
use cadgmm::trainer::{loss_and_gradients, LossWeights};
use cadgmm::{Cadgmm, Matrix};

/// k nearest by (squared distance, index), excluding self.
pub fn brute_force_knn(x: &Matrix, k: usize) -> Vec<Vec<usize>> {
    (0..x.rows())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..x.rows())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Gauss-Jordan inverse and determinant.
pub fn naive_inverse(m: &Matrix) -> (Matrix, f64) {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| (r == c) as u8 as f64).collect()).collect();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).unwrap()).unwrap();
        if p != c {
            a.swap(p, c);
            inv.swap(p, c);
            det = -det;
        }
        let pivot = a[c][c];
        det *= pivot;
        for j in 0..n {
            a[c][j] /= pivot;
            inv[c][j] /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    (Matrix::from_rows(&inv).unwrap(), det)
}

pub fn naive_energy(g: &GmmState, z: &[f64]) -> f64 {
    let d = z.len() as f64;
    let mut total = 0.0;
    for m in 0..g.components() {
        let (inv, det) = naive_inverse(&g.covariances[m]);
        let diff: Vec<f64> = z.iter().zip(g.means.row(m)).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..diff.len() {
            for j in 0..diff.len() {
                q += diff[i] * inv.get(i, j) * diff[j];
            }
        }
        total += g.phi[m] * (-0.5 * q).exp() / (det * (2.0 * std::f64::consts::PI).powf(d)).sqrt();
    }
    -total.ln()
}

/// Largest per-parameter relative error (Frobenius norms) between the
/// analytic loss gradient and central differences with step `h`.
pub fn gradient_relative_error(model: &Cadgmm, x: &Matrix, w: &LossWeights, h: f64) -> (f64, String) {
    let (_, grads) = loss_and_gradients(model, x, w).unwrap();
    let mut worst = (0.0, String::new());
    for id in 0..model.params.len() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            let m = model.params.get(id);
            Matrix::zeros(m.rows(), m.cols())
        });
        let mut numeric = Vec::new();
        for e in 0..analytic.data().len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut p = m.params.get(id).clone();
                let (r, c) = (e / p.cols(), e % p.cols());
                p.set(r, c, p.get(r, c) + delta);
                m.params.set(&model.params.name(id).to_string(), p).unwrap();
                loss_and_gradients(&m, x, w).unwrap().0.total
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = analytic.frobenius_sq().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        if rel > worst.0 {
            worst = (rel, model.params.name(id).to_string());
        }
    }
    worst
}
