//! Linear-Gaussian dynamic panel simulator with a known price effect.
//!
//! For each product and period `t`:
//!
//! ```text
//! X^o_t = c + ρ ⊙ X^o_{t−1} + σ_s ε^s
//! S_t   = (Q_{t−1}, P_{t−1}, cs, X^o_t)
//! P_t   = p(S_t) + σ_p ε^p + κ ε
//! A_t   = α(S_t) + σ_a η
//! Q_t   = A_t P_t + q(S_t) + γ tanh(Q_{t−1}) + σ_q ε
//! ```
//!
//! `cs` are cosine similarities of the product's true embedding to the
//! latent cluster directions. Period 0 starts from the deterministic fixed
//! point of the recursion after one discarded burn-in step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::panel::{FeatureBlock, FeatureKind, PanelDataset, PanelObservation, ProductId, StateVector};
use crate::rng::{self, derive_seed, standard_normal};

/// Upper bound on cosine similarity between latent cluster directions.
pub const MAX_CENTROID_COSINE: f64 = 0.5;
const MAX_CENTROID_TRIES: usize = 10_000;
const PILOT_ROUNDS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ElasticitySpec {
    Homogeneous {
        alpha0: f64,
    },
    /// `α(S) = a0 + Σ α_k (cs_k − c_k) + b1 (P_lag − c_p)/s_p + b2 (Q_lag − c_q)/s_q`.
    Heterogeneous {
        a0: f64,
        alpha: Vec<f64>,
        b1: f64,
        b2: f64,
    },
}

impl ElasticitySpec {
    pub fn average(&self) -> f64 {
        match self {
            ElasticitySpec::Homogeneous { alpha0 } => *alpha0,
            ElasticitySpec::Heterogeneous { a0, .. } => *a0,
        }
    }
}

/// Linear index `intercept + q_lag·Q + p_lag·P + similarityᵀcs + tabularᵀX^o`
/// plus Gaussian noise of scale `noise`. Empty coefficient vectors mean zero.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EquationSpec {
    pub intercept: f64,
    pub q_lag: f64,
    pub p_lag: f64,
    pub similarity: Vec<f64>,
    pub tabular: Vec<f64>,
    pub noise: f64,
}

impl Default for EquationSpec {
    fn default() -> Self {
        EquationSpec {
            intercept: 0.0,
            q_lag: 0.0,
            p_lag: 0.0,
            similarity: Vec::new(),
            tabular: Vec::new(),
            noise: 0.0,
        }
    }
}

impl EquationSpec {
    fn mean(&self, q_lag: f64, p_lag: f64, cs: &[f64], x: &[f64]) -> f64 {
        let mut v = self.intercept + self.q_lag * q_lag + self.p_lag * p_lag;
        for (a, b) in self.similarity.iter().zip(cs) {
            v += a * b;
        }
        for (a, b) in self.tabular.iter().zip(x) {
            v += a * b;
        }
        v
    }
}

/// Time-varying tabular controls, one AR(1) per column.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct StateSpec {
    pub intercept: Vec<f64>,
    pub own_lag: Vec<f64>,
    pub noise: f64,
}

impl StateSpec {
    pub fn n_controls(&self) -> usize {
        self.intercept.len()
    }
}

/// Centering of the lag modifiers inside `α(S)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Centering {
    /// Means and standard deviations of the lags from pilot runs of the
    /// same design.
    Pilot,
    Fixed {
        q_center: f64,
        q_scale: f64,
        p_center: f64,
        p_scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SemConfig {
    pub n_products: usize,
    /// Number of state periods `T`; the panel covers periods `0..=T`.
    pub n_periods: usize,
    pub embedding_dim: usize,
    pub n_clusters: usize,
    pub embedding_noise: f64,
    pub elasticity: ElasticitySpec,
    pub sigma_a: f64,
    pub outcome: EquationSpec,
    /// Weight of `tanh(Q_{t−1})` in the outcome equation.
    pub q_lag_tanh: f64,
    pub price: EquationSpec,
    pub kappa: f64,
    pub state: StateSpec,
    pub centering: Centering,
    pub seed: u64,
}

impl Default for SemConfig {
    fn default() -> Self {
        SemConfig {
            n_products: 2000,
            n_periods: 9,
            embedding_dim: 64,
            n_clusters: 5,
            embedding_noise: 0.3,
            elasticity: ElasticitySpec::Homogeneous { alpha0: -0.54 },
            sigma_a: 0.0,
            outcome: EquationSpec {
                intercept: 0.0,
                q_lag: 0.5,
                p_lag: 0.1,
                similarity: vec![0.6, -0.4, 0.3, 0.0, 0.5],
                tabular: vec![0.2, -0.1],
                noise: 0.5,
            },
            q_lag_tanh: 0.0,
            price: EquationSpec {
                intercept: 1.0,
                q_lag: 0.2,
                p_lag: 0.5,
                similarity: vec![0.3, 0.2, -0.3, 0.1, 0.0],
                tabular: vec![0.1, 0.1],
                noise: 0.3,
            },
            kappa: 0.0,
            state: StateSpec {
                intercept: vec![0.5, 0.2],
                own_lag: vec![0.6, 0.3],
                noise: 0.5,
            },
            centering: Centering::Pilot,
            seed: 0,
        }
    }
}

fn check_len(name: &str, v: &[f64], want: usize) -> Result<()> {
    if !v.is_empty() && v.len() != want {
        return Err(Error::Config(format!(
            "{name} has {} coefficients, expected {want}",
            v.len()
        )));
    }
    Ok(())
}

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_clusters;
        if k == 0 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        if self.embedding_dim < k {
            return Err(Error::Config(format!(
                "embedding_dim {} must be at least n_clusters {k}",
                self.embedding_dim
            )));
        }
        if self.n_products < k {
            return Err(Error::Config(format!(
                "n_products {} must be at least n_clusters {k}",
                self.n_products
            )));
        }
        if self.n_periods == 0 {
            return Err(Error::Config("n_periods must be at least 1".into()));
        }
        for (name, s) in [
            ("embedding_noise", self.embedding_noise),
            ("sigma_a", self.sigma_a),
            ("outcome.noise", self.outcome.noise),
            ("price.noise", self.price.noise),
            ("state.noise", self.state.noise),
        ] {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0")));
            }
        }
        let n_tab = self.state.n_controls();
        if self.state.own_lag.len() != n_tab {
            return Err(Error::Config(
                "state.own_lag and state.intercept must have equal length".into(),
            ));
        }
        check_len("outcome.similarity", &self.outcome.similarity, k)?;
        check_len("price.similarity", &self.price.similarity, k)?;
        check_len("outcome.tabular", &self.outcome.tabular, n_tab)?;
        check_len("price.tabular", &self.price.tabular, n_tab)?;
        if let ElasticitySpec::Heterogeneous { alpha, .. } = &self.elasticity {
            check_len("elasticity.alpha", alpha, k)?;
        }
        if let Centering::Fixed { q_scale, p_scale, .. } = self.centering {
            if !(q_scale > 0.0 && p_scale > 0.0) {
                return Err(Error::Config("centering scales must be positive".into()));
            }
        }
        self.check_stability()
    }

    /// Every own-lag coefficient must be below one in magnitude, and the
    /// joint (Q, P) recursion evaluated at the average effect must have
    /// spectral radius below one.
    pub fn check_stability(&self) -> Result<()> {
        let own = [
            ("outcome.q_lag", self.outcome.q_lag),
            ("price.p_lag", self.price.p_lag),
        ];
        for (name, c) in own {
            if !(c.abs() < 1.0) {
                return Err(Error::Stability(format!(
                    "{name} = {c} makes the recursion explosive"
                )));
            }
        }
        for (j, c) in self.state.own_lag.iter().enumerate() {
            if !(c.abs() < 1.0) {
                return Err(Error::Stability(format!(
                    "state.own_lag[{j}] = {c} makes the recursion explosive"
                )));
            }
        }
        let rho = spectral_radius(&self.transition());
        if !(rho < 1.0) {
            return Err(Error::Stability(format!(
                "joint quantity-price recursion has spectral radius {rho:.4} ≥ 1"
            )));
        }
        Ok(())
    }

    /// `[[∂Q/∂Q_lag, ∂Q/∂P_lag], [∂P/∂Q_lag, ∂P/∂P_lag]]` at the average effect.
    fn transition(&self) -> [[f64; 2]; 2] {
        let a = self.elasticity.average();
        let (o, p) = (&self.outcome, &self.price);
        [
            [a * p.q_lag + o.q_lag + self.q_lag_tanh, a * p.p_lag + o.p_lag],
            [p.q_lag, p.p_lag],
        ]
    }
}

fn spectral_radius(m: &[[f64; 2]; 2]) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = libm::sqrt(disc);
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        libm::sqrt(det)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `n_products × d`, unit rows.
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    /// `K × d`, unit rows.
    pub centroids: Matrix,
}

fn unit_gaussian(d: usize, rng: &mut rng::SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Rejection-samples `k` unit directions with pairwise cosine below
/// `max_cosine`.
pub(crate) fn sample_directions(
    k: usize,
    d: usize,
    max_cosine: f64,
    rng: &mut rng::SeededRng,
) -> Result<Matrix> {
    let mut centroids = Matrix::zeros(k, d);
    let mut accepted = 0;
    let mut tries = 0;
    while accepted < k {
        if tries == MAX_CENTROID_TRIES {
            return Err(Error::Geometry(format!(
                "could not place {k} directions with pairwise cosine < {max_cosine} \
                 in dimension {d}; increase embedding_dim"
            )));
        }
        tries += 1;
        let v = unit_gaussian(d, rng);
        if (0..accepted).all(|c| dot(centroids.row(c), &v) < max_cosine) {
            centroids.row_mut(accepted).copy_from_slice(&v);
            accepted += 1;
        }
    }
    Ok(centroids)
}

/// Latent cluster directions and product embeddings around them.
pub fn simulate_embeddings(config: &SemConfig) -> Result<Embeddings> {
    let (n, d, k) = (config.n_products, config.embedding_dim, config.n_clusters);
    if k == 0 || k > n || d < k {
        return Err(Error::Config(format!(
            "embedding simulation needs 1 ≤ K ≤ N and d ≥ K; got K={k}, N={n}, d={d}"
        )));
    }
    let mut rng = rng::seeded(derive_seed(config.seed, 10));
    let centroids = sample_directions(k, d, MAX_CENTROID_COSINE, &mut rng)?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng);
    let scale = config.embedding_noise / libm::sqrt(d as f64);
    let mut vectors = Matrix::zeros(n, d);
    for (i, &l) in labels.iter().enumerate() {
        let row = vectors.row_mut(i);
        for (v, c) in row.iter_mut().zip(centroids.row(l)) {
            *v = c + scale * standard_normal(&mut rng);
        }
        let mut nrm = norm(row);
        if nrm == 0.0 {
            row.copy_from_slice(centroids.row(l));
            nrm = 1.0;
        }
        for v in row.iter_mut() {
            *v /= nrm;
        }
    }
    Ok(Embeddings {
        vectors,
        labels,
        centroids,
    })
}

/// Centering constants used by `α(S)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModifierCenters {
    pub q_center: f64,
    pub q_scale: f64,
    pub p_center: f64,
    pub p_scale: f64,
    pub similarity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per state row (product-major, periods `1..=T`).
    pub product_ids: Vec<ProductId>,
    pub periods: Vec<usize>,
    pub a_it: Vec<f64>,
    pub cace: Vec<f64>,
    /// Outcome shock `ε_it`.
    pub outcome_shock: Vec<f64>,
    pub ace: f64,
    pub cluster_label: Vec<usize>,
    pub true_embeddings: Matrix,
    pub centroids: Matrix,
    /// `n_products × K` true cosine similarities.
    pub similarity: Matrix,
    pub elasticity: ElasticitySpec,
    pub centers: ModifierCenters,
}

impl GroundTruth {
    pub fn cace_at(&self, q_lag: f64, p_lag: f64, similarity: &[f64]) -> f64 {
        elasticity_at(&self.elasticity, &self.centers, q_lag, p_lag, similarity)
    }
}

fn elasticity_at(
    spec: &ElasticitySpec,
    c: &ModifierCenters,
    q_lag: f64,
    p_lag: f64,
    cs: &[f64],
) -> f64 {
    match spec {
        ElasticitySpec::Homogeneous { alpha0 } => *alpha0,
        ElasticitySpec::Heterogeneous { a0, alpha, b1, b2 } => {
            let mut v = a0
                + b1 * (p_lag - c.p_center) / c.p_scale
                + b2 * (q_lag - c.q_center) / c.q_scale;
            for ((a, s), m) in alpha.iter().zip(cs).zip(&c.similarity) {
                v += a * (s - m);
            }
            v
        }
    }
}

/// True conditional effect at a state; `similarity` are the product's true
/// cluster similarities. Homogeneous designs return `α0` everywhere.
pub fn ground_truth_cace(truth: &GroundTruth, state: &StateVector, similarity: &[f64]) -> f64 {
    truth.cace_at(state.q_lag, state.p_lag, similarity)
}

pub fn product_id(i: usize) -> ProductId {
    ProductId(format!("p{i:06}"))
}

pub fn tabular_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("x{j}")).collect()
}

struct Path {
    q: Vec<f64>,
    p: Vec<f64>,
    x: Vec<Vec<f64>>,
    a: Vec<f64>,
    cace: Vec<f64>,
    eps: Vec<f64>,
}

/// Deterministic fixed point of the (Q, P) recursion for one product at the
/// average effect, ignoring the tanh term.
fn fixed_point(config: &SemConfig, cs: &[f64], x: &[f64]) -> (f64, f64) {
    let a = config.elasticity.average();
    let (o, p) = (&config.outcome, &config.price);
    let bp = p.mean(0.0, 0.0, cs, x);
    let bq = o.mean(0.0, 0.0, cs, x);
    // P = bp + p.q Q + p.p P ;  Q = a P + bq + o.q Q + o.p P
    let m = [
        [1.0 - p.p_lag, -p.q_lag],
        [-(a + o.p_lag), 1.0 - o.q_lag],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return (0.0, 0.0);
    }
    let pp = (bp * m[1][1] - m[0][1] * bq) / det;
    let qq = (m[0][0] * bq - m[1][0] * bp) / det;
    (qq, pp)
}

fn run_product(
    config: &SemConfig,
    spec: &ElasticitySpec,
    centers: &ModifierCenters,
    cs: &[f64],
    rng: &mut rng::SeededRng,
) -> Path {
    let n_tab = config.state.n_controls();
    let t_total = config.n_periods + 1;
    let mut x: Vec<f64> = config
        .state
        .intercept
        .iter()
        .zip(&config.state.own_lag)
        .map(|(c, r)| c / (1.0 - r))
        .collect();
    let (mut q, mut p) = fixed_point(config, cs, &x);
    let mut path = Path {
        q: Vec::with_capacity(t_total),
        p: Vec::with_capacity(t_total),
        x: Vec::with_capacity(t_total),
        a: Vec::with_capacity(t_total),
        cace: Vec::with_capacity(t_total),
        eps: Vec::with_capacity(t_total),
    };
    // step 0 is the discarded burn-in
    for step in 0..=t_total {
        let mut x_new = vec![0.0; n_tab];
        for j in 0..n_tab {
            x_new[j] = config.state.intercept[j]
                + config.state.own_lag[j] * x[j]
                + config.state.noise * standard_normal(rng);
        }
        let e_p = standard_normal(rng);
        let e = standard_normal(rng);
        let eta = standard_normal(rng);
        let price = config.price.mean(q, p, cs, &x_new) + config.price.noise * e_p + config.kappa * e;
        let cace = elasticity_at(spec, centers, q, p, cs);
        let a = cace + config.sigma_a * eta;
        let quantity = a * price
            + config.outcome.mean(q, p, cs, &x_new)
            + config.q_lag_tanh * libm::tanh(q)
            + config.outcome.noise * e;
        q = quantity;
        p = price;
        x = x_new;
        if step > 0 {
            path.q.push(q);
            path.p.push(p);
            path.x.push(x.clone());
            path.a.push(a);
            path.cace.push(cace);
            path.eps.push(e);
        }
    }
    path
}

fn simulate_paths(
    config: &SemConfig,
    spec: &ElasticitySpec,
    centers: &ModifierCenters,
    similarity: &Matrix,
    seed: u64,
) -> Vec<Path> {
    let mut rng = rng::seeded(seed);
    (0..config.n_products)
        .map(|i| run_product(config, spec, centers, similarity.row(i), &mut rng))
        .collect()
}

fn lag_moments(paths: &[Path]) -> (f64, f64, f64, f64) {
    let mut qs = Vec::new();
    let mut ps = Vec::new();
    for path in paths {
        let t = path.q.len();
        qs.extend_from_slice(&path.q[..t - 1]);
        ps.extend_from_slice(&path.p[..t - 1]);
    }
    let fix = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
    (
        crate::stats::mean(&qs),
        fix(libm::sqrt(crate::stats::variance(&qs))),
        crate::stats::mean(&ps),
        fix(libm::sqrt(crate::stats::variance(&ps))),
    )
}

fn resolve_centers(config: &SemConfig, similarity: &Matrix) -> ModifierCenters {
    let n = similarity.nrows() as f64;
    let sim_center: Vec<f64> = (0..similarity.ncols())
        .map(|k| similarity.column(k).iter().sum::<f64>() / n)
        .collect();
    let mut centers = ModifierCenters {
        q_center: 0.0,
        q_scale: 1.0,
        p_center: 0.0,
        p_scale: 1.0,
        similarity: sim_center,
    };
    match (&config.centering, &config.elasticity) {
        (Centering::Fixed { q_center, q_scale, p_center, p_scale }, _) => {
            centers.q_center = *q_center;
            centers.q_scale = *q_scale;
            centers.p_center = *p_center;
            centers.p_scale = *p_scale;
        }
        (Centering::Pilot, ElasticitySpec::Homogeneous { .. }) => {}
        (Centering::Pilot, spec) => {
            let pilot_seed = derive_seed(config.seed, 12);
            let flat = ElasticitySpec::Homogeneous {
                alpha0: spec.average(),
            };
            for round in 0..=PILOT_ROUNDS {
                let s = if round == 0 { &flat } else { spec };
                let paths = simulate_paths(config, s, &centers, similarity, pilot_seed);
                let (qc, qs, pc, ps) = lag_moments(&paths);
                centers.q_center = qc;
                centers.q_scale = qs;
                centers.p_center = pc;
                centers.p_scale = ps;
            }
        }
    }
    centers
}

/// Generates a balanced panel (periods `0..=T`) and its ground truth.
///
/// The panel carries the true embeddings as an `emb` block and their
/// cluster similarities as a `cs` block, plus the tabular controls `x<j>`.
pub fn simulate(config: &SemConfig) -> Result<(PanelDataset, GroundTruth)> {
    config.validate()?;
    let emb = simulate_embeddings(config)?;
    let similarity = emb.vectors.matmul(&emb.centroids.transpose())?;
    let centers = resolve_centers(config, &similarity);
    let paths = simulate_paths(
        config,
        &config.elasticity,
        &centers,
        &similarity,
        derive_seed(config.seed, 11),
    );

    let (d, k) = (config.embedding_dim, config.n_clusters);
    let t_total = config.n_periods + 1;
    let n_state = config.n_products * config.n_periods;
    let mut observations = Vec::with_capacity(config.n_products * t_total);
    let mut truth_ids = Vec::with_capacity(n_state);
    let mut periods = Vec::with_capacity(n_state);
    let mut a_it = Vec::with_capacity(n_state);
    let mut cace = Vec::with_capacity(n_state);
    let mut shock = Vec::with_capacity(n_state);
    for (i, path) in paths.iter().enumerate() {
        let id = product_id(i);
        let mut features = Vec::with_capacity(d + k);
        features.extend_from_slice(emb.vectors.row(i));
        features.extend_from_slice(similarity.row(i));
        for t in 0..t_total {
            observations.push(PanelObservation {
                product_id: id.clone(),
                period: t,
                q: path.q[t],
                p: path.p[t],
                tabular_controls: path.x[t].clone(),
                embedding_features: features.clone(),
            });
            if t > 0 {
                truth_ids.push(id.clone());
                periods.push(t);
                a_it.push(path.a[t]);
                cace.push(path.cace[t]);
                shock.push(path.eps[t]);
            }
        }
    }
    let blocks = vec![
        FeatureBlock {
            kind: FeatureKind::Embedding,
            names: FeatureKind::Embedding.column_names(d),
        },
        FeatureBlock {
            kind: FeatureKind::Similarity,
            names: FeatureKind::Similarity.column_names(k),
        },
    ];
    let panel = PanelDataset::new(
        observations,
        tabular_names(config.state.n_controls()),
        blocks,
    )?;
    let truth = GroundTruth {
        product_ids: truth_ids,
        periods,
        a_it,
        cace,
        outcome_shock: shock,
        ace: config.elasticity.average(),
        cluster_label: emb.labels,
        true_embeddings: emb.vectors,
        centroids: emb.centroids,
        similarity,
        elasticity: config.elasticity.clone(),
        centers,
    };
    Ok((panel, truth))
}
