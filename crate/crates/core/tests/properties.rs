mod common;

use cadgmm::eval::{flag_count, prf1, threshold_by_ratio};
use cadgmm::model::gmm_fit;
use cadgmm::{build_knn_graph, Cadgmm, Matrix, ModelConfig, SeededRng};
use common::oracles::{brute_force_knn, naive_energy, naive_matmul};
use proptest::prelude::*;

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        encoder_hidden: vec![4],
        graph_dim: 4,
        latent_dim: 3,
        decoder_hidden: vec![4],
        estimator_hidden: vec![4],
        mixtures: 2,
        k: 2,
        ..ModelConfig::satellite()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_brute_force(n in 2usize..=64, f in 1usize..6, seed in any::<u64>(), kfrac in 0.0f64..1.0) {
        let mut rng = SeededRng::new(seed);
        // coarse grid values make ties common
        let data: Vec<f64> = (0..n * f).map(|_| rng.below(4) as f64).collect();
        let x = Matrix::new(n, f, data).unwrap();
        let k = 1 + ((n - 2) as f64 * kfrac) as usize;
        let g = build_knn_graph(&x, k).unwrap();
        let oracle = brute_force_knn(&x, k);
        for i in 0..n {
            prop_assert_eq!(g.neighbors(i), &oracle[i][..]);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = random_matrix(&mut rng, m, k);
        let b = random_matrix(&mut rng, k, n);
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        // (AB)^T = B^T A^T
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn threshold_flags_ceil_ratio_n(energies in prop::collection::vec(-5.0f64..5.0, 1..200), ratio in 0.001f64..1.0) {
        let (threshold, pred) = threshold_by_ratio(&energies, ratio);
        let flagged = pred.iter().filter(|&&p| p == 1).count();
        prop_assert_eq!(flagged, flag_count(energies.len(), ratio));
        prop_assert_eq!(flagged, ((ratio * energies.len() as f64) - 1e-9).ceil() as usize);
        for (e, p) in energies.iter().zip(&pred) {
            if *p == 1 {
                prop_assert!(*e >= threshold);
            } else {
                prop_assert!(*e <= threshold);
            }
        }
    }

    #[test]
    fn prf1_matches_confusion_oracle(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..100)) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let m = prf1(&labels, &preds).unwrap();
        let count = |y: u8, p: u8| pairs.iter().filter(|&&q| q == (y, p)).count() as f64;
        let (tp, fp, fnn) = (count(1, 1), count(0, 1), count(1, 0));
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        prop_assert!((m.precision - precision).abs() < 1e-12);
        prop_assert!((m.recall - recall).abs() < 1e-12);
        prop_assert!((m.f1 - f1).abs() < 1e-12);
    }
}

#[test]
fn energy_matches_naive_inverse_oracle() {
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed);
        let (n, d, m) = (30, 4, 3);
        let z = random_matrix(&mut rng, n, d);
        let raw = random_matrix(&mut rng, n, m);
        let gamma = cadgmm::numeric::row_softmax(&raw);
        let g = gmm_fit(&z, &gamma, 1e-6).unwrap();
        let energies = g.energy(&z).unwrap();
        for (i, e) in energies.iter().enumerate() {
            let oracle = naive_energy(&g, z.row(i));
            assert!((e - oracle).abs() < 1e-8, "seed {seed} row {i}: {e} vs {oracle}");
        }
    }
}

#[test]
fn one_hot_membership_recovers_cluster_moments() {
    let mut rng = SeededRng::new(3);
    let z = random_matrix(&mut rng, 12, 2);
    let mut gamma = Matrix::zeros(12, 2);
    for i in 0..12 {
        gamma.set(i, i % 2, 1.0);
    }
    let g = gmm_fit(&z, &gamma, 1e-6).unwrap();
    for c in 0..2 {
        let rows: Vec<usize> = (0..12).filter(|i| i % 2 == c).collect();
        let mean: Vec<f64> = (0..2).map(|j| rows.iter().map(|&r| z.get(r, j)).sum::<f64>() / 6.0).collect();
        for j in 0..2 {
            assert!((g.means.get(c, j) - mean[j]).abs() < 1e-12);
        }
        for a in 0..2 {
            for b in 0..2 {
                let cov = rows
                    .iter()
                    .map(|&r| (z.get(r, a) - mean[a]) * (z.get(r, b) - mean[b]))
                    .sum::<f64>()
                    / 6.0;
                let eps = if a == b { 1e-6 } else { 0.0 };
                assert!((g.covariances[c].get(a, b) - cov - eps).abs() < 1e-12);
            }
        }
        assert!((g.phi[c] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn attention_and_membership_rows_sum_to_one() {
    for seed in 0..10 {
        let mut rng = SeededRng::new(seed);
        let x = random_matrix(&mut rng, 20, 5);
        let model = Cadgmm::new(tiny(), seed).unwrap();
        let g = build_knn_graph(&x, 3).unwrap();
        let att = model.attention(&x, &g).unwrap();
        let dense = att.dense();
        for r in 0..dense.rows() {
            let s: f64 = dense.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let out = model.forward(&x, &g).unwrap();
        for r in 0..out.membership.rows() {
            let s: f64 = out.membership.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(out.membership.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let mut rng = SeededRng::new(11);
    // continuous random rows: no distance ties
    let x = random_matrix(&mut rng, 16, 5);
    let model = Cadgmm::new(tiny(), 2).unwrap();
    let out = model.forward(&x, &build_knn_graph(&x, 3).unwrap()).unwrap();
    let perm = rng.permutation(16);
    let xp = x.select_rows(&perm);
    let outp = model.forward(&xp, &build_knn_graph(&xp, 3).unwrap()).unwrap();
    assert!(outp.z.max_abs_diff(&out.z.select_rows(&perm)) < 1e-12);
    assert!(outp.membership.max_abs_diff(&out.membership.select_rows(&perm)) < 1e-12);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = SeededRng::new(5);
    let x = random_matrix(&mut rng, 10, 5);
    let g = build_knn_graph(&x, 2).unwrap();
    let a = Cadgmm::new(tiny(), 9).unwrap().forward(&x, &g).unwrap();
    let b = Cadgmm::new(tiny(), 9).unwrap().forward(&x, &g).unwrap();
    assert_eq!(a, b);
}
