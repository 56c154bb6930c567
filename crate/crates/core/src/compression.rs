//! Embedding compression: Gaussian random projection, centering onto the
//! unit hypersphere, PCA features and k-means centroid cosine similarities.
//!
//! The projection is deliberately unscaled (`Ēᵢ = Eᵢᵀ G`, `G` with i.i.d.
//! N(0, 1) entries): the subsequent normalization removes any common scale.
//! Centroids are raw k-means means and are not renormalized; the cosine
//! formula divides by their norm.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, symmetric_eigen, Matrix};
use crate::rng::{self, derive_seed, standard_normal};

pub const DEFAULT_TARGET_DIM: usize = 256;
pub const DEFAULT_K: usize = 5;
/// Eigenvalue gap below which PCA axes are reported as not unique.
pub const EIGEN_TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProjection {
    matrix: Matrix,
}

impl GaussianProjection {
    /// `d × m` matrix of i.i.d. standard normal entries drawn from `seed`.
    pub fn sample(d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::Config(
                "projection dimensions must be positive".into(),
            ));
        }
        let mut rng = rng::seeded(seed);
        let data = (0..d * m).map(|_| standard_normal(&mut rng)).collect();
        Ok(GaussianProjection {
            matrix: Matrix::from_vec(d, m, data)?,
        })
    }

    /// Identity projection, used to test the rest of the pipeline in
    /// isolation.
    pub fn identity(d: usize) -> Self {
        GaussianProjection {
            matrix: Matrix::identity(d),
        }
    }

    pub fn from_matrix(matrix: Matrix) -> Self {
        GaussianProjection { matrix }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn project(&self, e: &Matrix) -> Result<Matrix> {
        if e.ncols() != self.input_dim() {
            return Err(Error::dim("projection input", self.input_dim(), e.ncols()));
        }
        e.matmul(&self.matrix)
    }
}

pub fn jl_project(e: &Matrix, m: usize, seed: u64) -> Result<Matrix> {
    GaussianProjection::sample(e.ncols(), m, seed)?.project(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub features: Matrix,
    pub mean: Vec<f64>,
}

/// Subtracts the column mean and scales each row to unit Euclidean norm.
pub fn center_normalize(e_bar: &Matrix) -> Result<Normalized> {
    let n = e_bar.nrows();
    if n == 0 {
        return Err(Error::Length("no rows to normalize".into()));
    }
    let mut mean = vec![0.0; e_bar.ncols()];
    for r in e_bar.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let features = normalize_with_mean(e_bar, &mean)?;
    Ok(Normalized { features, mean })
}

/// Centers with a stored mean and projects rows onto the unit sphere.
pub fn normalize_with_mean(e_bar: &Matrix, mean: &[f64]) -> Result<Matrix> {
    if e_bar.ncols() != mean.len() {
        return Err(Error::dim("normalization mean", mean.len(), e_bar.ncols()));
    }
    let mean_norm = norm(mean);
    let mut out = Matrix::zeros(e_bar.nrows(), e_bar.ncols());
    for (i, r) in e_bar.rows().enumerate() {
        let dst = out.row_mut(i);
        for ((d, v), m) in dst.iter_mut().zip(r).zip(mean) {
            *d = v - m;
        }
        let nrm = norm(dst);
        let scale = norm(r).max(mean_norm);
        if !(nrm > 1e-12 * scale) || !nrm.is_finite() {
            return Err(Error::Degenerate(format!(
                "row {i} coincides with the embedding mean and cannot be normalized"
            )));
        }
        for d in dst.iter_mut() {
            *d /= nrm;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `K × m`; row `k` is the axis γ_k.
    pub axes: Matrix,
    pub eigenvalues: Vec<f64>,
    /// Set when two of the leading eigenvalues (or the K-th and the next)
    /// are within [`EIGEN_TIE_TOL`], i.e. the axes are not unique.
    pub tie_warning: bool,
}

impl PcaModel {
    /// `X^pc_ik = γ_kᵀ X^e_i`.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.axes.ncols() {
            return Err(Error::dim("pca transform", self.axes.ncols(), x.ncols()));
        }
        x.matmul(&self.axes.transpose())
    }
}

/// Top-`k` eigenvectors of the sample covariance of `x`, ordered by
/// descending eigenvalue, each signed so its largest-magnitude coordinate is
/// positive.
pub fn pca_features(x: &Matrix, k: usize) -> Result<(PcaModel, Matrix)> {
    let (n, m) = (x.nrows(), x.ncols());
    if k == 0 || n < 2 || k > (n - 1).min(m) {
        return Err(Error::Config(format!(
            "PCA needs 1 ≤ K ≤ min(n − 1, m); got K={k}, n={n}, m={m}"
        )));
    }
    let mut mean = vec![0.0; m];
    for r in x.rows() {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= n as f64;
    }
    let mut centered = x.clone();
    for i in 0..n {
        for (v, mu) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let mut cov = centered.gram();
    for i in 0..m {
        for j in 0..m {
            cov[(i, j)] /= (n - 1) as f64;
        }
    }
    let eig = symmetric_eigen(&cov)?;
    let mut axes = Matrix::zeros(k, m);
    for c in 0..k {
        let mut v = eig.vectors.column(c);
        let mut big = 0;
        for j in 1..m {
            if v[j].abs() > v[big].abs() {
                big = j;
            }
        }
        if v[big] < 0.0 {
            for a in &mut v {
                *a = -*a;
            }
        }
        axes.row_mut(c).copy_from_slice(&v);
    }
    let check = (k + 1).min(m);
    let tie_warning = eig.values[..check]
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() < EIGEN_TIE_TOL);
    let model = PcaModel {
        axes,
        eigenvalues: eig.values[..k].to_vec(),
        tie_warning,
    };
    let features = model.transform(x)?;
    Ok((model, features))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once inertia improves by less than this between iterations.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 10,
            max_iter: 300,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// `(iteration, cluster)` pairs where an empty cluster was reseeded to
    /// the farthest point.
    pub reseeded: Vec<(usize, usize)>,
    pub restart: usize,
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins, ties going to the lower restart index.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, config: KMeansConfig) -> Result<KMeansFit> {
    if k == 0 || k > x.nrows() {
        return Err(Error::Config(format!(
            "k-means needs 1 ≤ K ≤ n; got K={k}, n={}",
            x.nrows()
        )));
    }
    if config.restarts == 0 || config.max_iter == 0 {
        return Err(Error::Config("k-means restarts and iterations must be positive".into()));
    }
    let run = |r: usize| lloyd(x, k, derive_seed(seed, r as u64), config, r);

    #[cfg(feature = "parallel")]
    let fits: Vec<KMeansFit> = {
        use rayon::prelude::*;
        (0..config.restarts).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let fits: Vec<KMeansFit> = (0..config.restarts).map(run).collect();

    let mut best: Option<KMeansFit> = None;
    for f in fits {
        match &best {
            Some(b) if b.inertia <= f.inertia => {}
            _ => best = Some(f),
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut rng::SeededRng) -> Matrix {
    let n = x.nrows();
    let mut centroids = Matrix::zeros(k, x.ncols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, r) in x.rows().enumerate() {
            let d = sq_dist(r, centroids.row(c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn assign(x: &Matrix, centroids: &Matrix, labels: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, r) in x.rows().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.nrows() {
            let d = sq_dist(r, centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        dist[i] = best_d;
        inertia += best_d;
    }
    inertia
}

fn lloyd(x: &Matrix, k: usize, seed: u64, config: KMeansConfig, restart: usize) -> KMeansFit {
    let n = x.nrows();
    let m = x.ncols();
    let mut rng = rng::seeded(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    for it in 0..config.max_iter {
        let inertia = assign(x, &centroids, &mut labels, &mut dist);
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| prev - inertia < config.tol);
        trace.push(inertia);
        if converged || it + 1 == config.max_iter {
            break;
        }
        let mut sums = Matrix::zeros(k, m);
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Farthest point from its current centroid becomes the new one.
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centroids.row_mut(c).copy_from_slice(x.row(far));
                dist[far] = 0.0;
                reseeded.push((it, c));
            } else {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    KMeansFit {
        inertia: *trace.last().unwrap_or(&0.0),
        centroids,
        labels,
        inertia_trace: trace,
        reseeded,
        restart,
    }
}

/// `CS_ik = c_kᵀ x_i / (‖c_k‖ ‖x_i‖)`; zero when either norm vanishes.
pub fn cosine_similarities(x: &Matrix, centroids: &Matrix) -> Result<Matrix> {
    if x.ncols() != centroids.ncols() {
        return Err(Error::dim("cosine similarities", centroids.ncols(), x.ncols()));
    }
    let k = centroids.nrows();
    let cnorm: Vec<f64> = centroids.rows().map(norm).collect();
    let mut out = Matrix::zeros(x.nrows(), k);
    for (i, r) in x.rows().enumerate() {
        let xn = norm(r);
        for c in 0..k {
            let den = cnorm[c] * xn;
            out[(i, c)] = if den > 0.0 {
                (dot(centroids.row(c), r) / den).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

pub fn centroid_similarities(x: &Matrix, k: usize, seed: u64) -> Result<(KMeansFit, Matrix)> {
    let fit = kmeans(x, k, seed, KMeansConfig::default())?;
    let sims = cosine_similarities(x, &fit.centroids)?;
    Ok((fit, sims))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeatures {
    /// Projected, centered, unit-norm embeddings `X^e` (`n × m`).
    pub embeddings: Matrix,
    pub pcs: Matrix,
    pub similarities: Matrix,
}

/// Everything needed to map raw embeddings to compressed features without
/// refitting.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionModel {
    pub projection: GaussianProjection,
    pub mean: Vec<f64>,
    pub pca: PcaModel,
    pub centroids: Matrix,
    pub k: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl CompressionModel {
    /// Fits projection, normalization, PCA and k-means on the training
    /// embeddings and returns their features through [`Self::transform`].
    pub fn fit(e: &Matrix, m: usize, k: usize, seed: u64) -> Result<(Self, CompressedFeatures)> {
        let projection = GaussianProjection::sample(e.ncols(), m, derive_seed(seed, 0))?;
        Self::fit_with_projection(e, projection, k, seed)
    }

    pub fn fit_with_projection(
        e: &Matrix,
        projection: GaussianProjection,
        k: usize,
        seed: u64,
    ) -> Result<(Self, CompressedFeatures)> {
        let projected = projection.project(e)?;
        let normalized = center_normalize(&projected)?;
        let (pca, _) = pca_features(&normalized.features, k)?;
        let km = kmeans(
            &normalized.features,
            k,
            derive_seed(seed, 1),
            KMeansConfig::default(),
        )?;
        let mut warnings = Vec::new();
        if pca.tie_warning {
            warnings.push(String::from(
                "tied covariance eigenvalues: PCA axes are not unique",
            ));
        }
        for (it, c) in &km.reseeded {
            warnings.push(format!(
                "k-means iteration {it}: empty cluster {c} reseeded to farthest point"
            ));
        }
        let model = CompressionModel {
            projection,
            mean: normalized.mean,
            pca,
            centroids: km.centroids,
            k,
            seed,
            warnings,
        };
        let features = model.transform(e)?;
        Ok((model, features))
    }

    pub fn transform(&self, e: &Matrix) -> Result<CompressedFeatures> {
        let projected = self.projection.project(e)?;
        let embeddings = normalize_with_mean(&projected, &self.mean)?;
        let pcs = self.pca.transform(&embeddings)?;
        let similarities = cosine_similarities(&embeddings, &self.centroids)?;
        Ok(CompressedFeatures {
            embeddings,
            pcs,
            similarities,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_row_projects_to_zero() {
        let e = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]).unwrap();
        let out = jl_project(&e, 4, 9).unwrap();
        assert!(out.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_is_noop() {
        let e = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        assert_eq!(GaussianProjection::identity(2).project(&e).unwrap(), e);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let e = Matrix::from_rows(&[[3.0, 0.0, 1.0], [1.0, 2.0, 0.0], [0.0, 1.0, 5.0]]).unwrap();
        let n = center_normalize(&e).unwrap();
        for r in n.features.rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_row_hand_example() {
        // mean = (1, 1); centered rows (2, 0), (−1, 1), (−1, −1)
        let e = Matrix::from_rows(&[[3.0, 1.0], [0.0, 2.0], [0.0, 0.0]]).unwrap();
        let n = center_normalize(&e).unwrap();
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let want = [[1.0, 0.0], [-s, s], [-s, -s]];
        for (r, w) in n.features.rows().zip(want) {
            assert!((r[0] - w[0]).abs() < 1e-15 && (r[1] - w[1]).abs() < 1e-15);
        }
        assert_eq!(n.mean, vec![1.0, 1.0]);
    }

    #[test]
    fn antipodal_inputs() {
        let e = Matrix::from_rows(&[[5.0, 1.0], [1.0, 3.0]]).unwrap();
        let n = center_normalize(&e).unwrap();
        assert_eq!(n.features[(0, 0)], -n.features[(1, 0)]);
        assert_eq!(n.features[(0, 1)], -n.features[(1, 1)]);
    }

    #[test]
    fn row_at_mean_is_degenerate() {
        let e = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        match center_normalize(&e) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("row 1")),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn pca_toy_axes() {
        let x = Matrix::from_rows(&[[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let (model, feats) = pca_features(&x, 2).unwrap();
        assert!((model.axes[(0, 0)] - 1.0).abs() < 1e-12 && model.axes[(0, 1)].abs() < 1e-12);
        assert!(model.axes[(1, 0)].abs() < 1e-12 && (model.axes[(1, 1)] - 1.0).abs() < 1e-12);
        assert!((feats[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(!model.tie_warning);
    }

    #[test]
    fn pca_on_a_line() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [-1.0, -2.0]]).unwrap();
        let (model, _) = pca_features(&x, 1).unwrap();
        assert!(model.eigenvalues[0] > 0.0);
        let (model2, _) = pca_features(&x, 1).unwrap();
        assert_eq!(model, model2);
        assert!(pca_features(&x, 4).is_err());
    }

    #[test]
    fn cosine_edge_cases() {
        let c = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let s = cosine_similarities(&x, &c).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let d = i as f64 * 0.01;
            rows.push([d, 0.0]);
            rows.push([10.0 + d, 10.0]);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let fit = kmeans(&x, 2, 5, KMeansConfig::default()).unwrap();
        for i in (0..40).step_by(2) {
            assert_eq!(fit.labels[i], fit.labels[0]);
            assert_ne!(fit.labels[i + 1], fit.labels[0]);
        }
        for w in fit.inertia_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(kmeans(&x, 41, 5, KMeansConfig::default()).is_err());
    }
}
