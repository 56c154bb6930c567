mod common;

use common::{adjusted_rand_index, gaussian_matrix};
use demand_dml_core::compression::*;
use demand_dml_core::linalg::symmetric_eigen;
use demand_dml_core::sem::{simulate_embeddings, SemConfig};
use demand_dml_core::Matrix;
use proptest::prelude::*;

fn row_norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
    let mut m = gaussian_matrix(n, d, seed);
    for i in 0..n {
        let s = row_norm(m.row(i));
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Share of sampled pairs whose squared distance is preserved within
/// `tol` after dividing by `m`.
fn jl_within(e: &Matrix, proj: &Matrix, m: usize, tol: f64, pairs: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = demand_dml_core::rng::seeded(seed);
    let n = e.nrows();
    let mut ok = 0;
    for _ in 0..pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n);
        while b == a {
            b = rng.random_range(0..n);
        }
        let d0: f64 = e.row(a).iter().zip(e.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let d1: f64 = proj.row(a).iter().zip(proj.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        if (d1 / (m as f64 * d0) - 1.0).abs() <= tol {
            ok += 1;
        }
    }
    ok as f64 / pairs as f64
}

#[test]
fn jl_distortion_on_unit_vectors() {
    let e = unit_rows(1000, 1888, 21);
    let p = jl_project(&e, 256, 5).unwrap();
    let share = jl_within(&e, &p, 256, 0.35, 2000, 8);
    assert!(share >= 0.95, "share within bound {share}");
}

#[test]
fn kmeans_recovers_simulated_clusters() {
    let cfg = SemConfig {
        n_products: 1000,
        embedding_dim: 64,
        n_clusters: 5,
        embedding_noise: 0.3,
        seed: 77,
        ..SemConfig::default()
    };
    let emb = simulate_embeddings(&cfg).unwrap();
    let fit = kmeans(&emb.vectors, 5, 3, KMeansConfig::default()).unwrap();
    let ari = adjusted_rand_index(&emb.labels, &fit.labels);
    assert!(ari >= 0.9, "ARI {ari}");
    let (_, feats) = CompressionModel::fit(&emb.vectors, 256, 5, 4).unwrap();
    let est: Vec<usize> = feats
        .similarities
        .rows()
        .map(|r| (0..5).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
        .collect();
    let ari = adjusted_rand_index(&emb.labels, &est);
    assert!(ari >= 0.9, "ARI through compression {ari}");
}

#[test]
fn kmeans_inertia_trace_is_monotone_and_fixed_point() {
    let x = unit_rows(300, 8, 2);
    let fit = kmeans(&x, 4, 1, KMeansConfig::default()).unwrap();
    for w in fit.inertia_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    // Centroids are the means of their assigned points.
    for c in 0..4 {
        let members: Vec<&[f64]> = (0..300).filter(|&i| fit.labels[i] == c).map(|i| x.row(i)).collect();
        assert!(!members.is_empty());
        for j in 0..8 {
            let m = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
            assert!((m - fit.centroids[(c, j)]).abs() < 1e-9);
        }
    }
    let again = kmeans(&x, 4, 1, KMeansConfig::default()).unwrap();
    assert_eq!(again, fit);
}

#[test]
fn pca_axes_are_covariance_eigenvectors() {
    let x = gaussian_matrix(200, 6, 3);
    let mut scaled = x.clone();
    for i in 0..200 {
        for (j, v) in scaled.row_mut(i).iter_mut().enumerate() {
            *v *= (j + 1) as f64;
        }
    }
    let (model, feats) = pca_features(&scaled, 3).unwrap();
    let mean: Vec<f64> = (0..6).map(|j| scaled.column(j).iter().sum::<f64>() / 200.0).collect();
    let mut cov = Matrix::zeros(6, 6);
    for r in scaled.rows() {
        for a in 0..6 {
            for b in 0..6 {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / 199.0;
            }
        }
    }
    for k in 0..3 {
        let g = model.axes.row(k);
        let cg = cov.matvec(g).unwrap();
        for j in 0..6 {
            assert!((cg[j] - model.eigenvalues[k] * g[j]).abs() < 1e-8);
        }
        let big = (0..6).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        assert!(g[big] > 0.0);
        for i in 0..200 {
            let dot: f64 = scaled.row(i).iter().zip(g).map(|(a, b)| a * b).sum();
            assert!((feats[(i, k)] - dot).abs() < 1e-9);
        }
    }
    assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    let all = symmetric_eigen(&cov).unwrap();
    assert!((all.values.iter().sum::<f64>() - (0..6).map(|j| cov[(j, j)]).sum::<f64>()).abs() < 1e-8);
}

#[test]
fn pca_rank_bound() {
    let x = gaussian_matrix(4, 10, 1);
    assert!(pca_features(&x, 3).is_ok());
    assert!(pca_features(&x, 4).is_err());
    assert!(pca_features(&x, 0).is_err());
}

#[test]
fn out_of_sample_rows_use_training_mean() {
    let train = gaussian_matrix(50, 12, 9);
    let (model, feats) = CompressionModel::fit(&train, 6, 3, 1).unwrap();
    let again = model.transform(&train).unwrap();
    assert_eq!(again, feats);
    let test = gaussian_matrix(5, 12, 10);
    let out = model.transform(&test).unwrap();
    let proj = model.projection.project(&test).unwrap();
    for i in 0..5 {
        let centered: Vec<f64> = proj.row(i).iter().zip(&model.mean).map(|(a, b)| a - b).collect();
        let s = row_norm(&centered);
        for j in 0..6 {
            assert!((out.embeddings[(i, j)] - centered[j] / s).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn center_normalize_gives_unit_rows(seed: u64, n in 2usize..30, m in 1usize..12, scale in 1e-3f64..1e3) {
        let mut x = gaussian_matrix(n, m, seed);
        for i in 0..n {
            x.row_mut(i).iter_mut().for_each(|v| *v *= scale);
        }
        if let Ok(out) = center_normalize(&x) {
            for r in out.features.rows() {
                prop_assert!((row_norm(r) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pca_axes_orthonormal(seed: u64, n in 8usize..40, m in 2usize..8) {
        let x = gaussian_matrix(n, m, seed);
        let k = (m - 1).max(1);
        let (model, _) = pca_features(&x, k).unwrap();
        for a in 0..k {
            for b in 0..k {
                let d: f64 = model.axes.row(a).iter().zip(model.axes.row(b)).map(|(u, v)| u * v).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn similarities_are_cosines(seed: u64) {
        let x = gaussian_matrix(20, 5, seed);
        let c = gaussian_matrix(3, 5, seed ^ 1);
        let s = cosine_similarities(&x, &c).unwrap();
        for i in 0..20 {
            for k in 0..3 {
                let d: f64 = x.row(i).iter().zip(c.row(k)).map(|(a, b)| a * b).sum();
                let want = d / (row_norm(x.row(i)) * row_norm(c.row(k)));
                prop_assert!((s[(i, k)] - want).abs() < 1e-12);
            }
        }
    }
}
