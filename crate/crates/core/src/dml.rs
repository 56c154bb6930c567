//! Cross-fitted partialling-out and residual-on-residual effect estimation
//! with product-clustered inference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::learners::{self, LearnerSpec};
use crate::linalg::{cholesky, cholesky_solve, least_squares, Matrix};
use crate::panel::{ProductId, StateTable};
use crate::rng::{self, derive_seed};
use crate::stats;

pub const CENTERCEPT: &str = "Centercept";
pub const LAGGED_QUANTITY: &str = "Lagged Quantity";
pub const LAGGED_PRICE: &str = "Lagged Price";
pub const PRICE_EFFECT: &str = "Price";

pub fn similarity_label(k: usize) -> String {
    format!("Cluster Similarity {k}")
}

/// Product-level fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    n_folds: usize,
    assignment: BTreeMap<ProductId, usize>,
}

impl FoldPlan {
    /// Single fold: nuisances are fit and evaluated on the full sample.
    pub fn full_sample(products: &[ProductId]) -> Self {
        FoldPlan {
            n_folds: 1,
            assignment: products.iter().map(|p| (p.clone(), 0)).collect(),
        }
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn is_full_sample(&self) -> bool {
        self.n_folds == 1
    }

    pub fn fold_of(&self, product: &ProductId) -> Option<usize> {
        self.assignment.get(product).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<ProductId, usize> {
        &self.assignment
    }

    /// Number of products per fold.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            s[f] += 1;
        }
        s
    }
}

/// Shuffles the sorted, deduplicated product list and deals products into
/// `l` folds round-robin.
pub fn make_folds(products: &[ProductId], l: usize, seed: u64) -> Result<FoldPlan> {
    let mut ids: Vec<ProductId> = products.to_vec();
    ids.sort();
    ids.dedup();
    if l < 2 {
        return Err(Error::Config(format!(
            "cross-fitting needs at least 2 folds, got {l}; use the full-sample plan instead"
        )));
    }
    if l > ids.len() {
        return Err(Error::Config(format!(
            "{l} folds requested for {} products",
            ids.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p, i % l))
        .collect();
    Ok(FoldPlan {
        n_folds: l,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSpec {
    pub q: LearnerSpec,
    pub p: LearnerSpec,
}

impl NuisanceSpec {
    pub fn both(spec: LearnerSpec) -> Self {
        NuisanceSpec {
            q: spec.clone(),
            p: spec,
        }
    }
}

/// Cross-fitted residuals in canonical `(product, period)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPanel {
    pub product_ids: Vec<ProductId>,
    pub periods: Vec<usize>,
    /// Dense cluster index per row (rank of the product id).
    pub clusters: Vec<usize>,
    pub folds: Vec<usize>,
    pub q_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub q_perp: Vec<f64>,
    pub p_perp: Vec<f64>,
    /// Source row index of each residual row.
    pub order: Vec<usize>,
}

impl ResidualPanel {
    pub fn len(&self) -> usize {
        self.q_perp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_perp.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.iter().max().map_or(0, |m| m + 1)
    }

    /// Builds a residual panel directly from residual vectors (e.g. read back
    /// from disk), in the given order.
    pub fn from_residuals(
        product_ids: Vec<ProductId>,
        periods: Vec<usize>,
        q_perp: Vec<f64>,
        p_perp: Vec<f64>,
    ) -> Result<Self> {
        let n = product_ids.len();
        for (name, len) in [("periods", periods.len()), ("q_perp", q_perp.len()), ("p_perp", p_perp.len())] {
            if len != n {
                return Err(Error::Length(format!(
                    "{name} has {len} entries for {n} residual rows"
                )));
            }
        }
        let clusters = dense_clusters(&product_ids);
        Ok(ResidualPanel {
            product_ids,
            periods,
            clusters,
            folds: vec![0; n],
            q_hat: vec![0.0; n],
            p_hat: vec![0.0; n],
            q_perp,
            p_perp,
            order: (0..n).collect(),
        })
    }
}

fn dense_clusters(ids: &[ProductId]) -> Vec<usize> {
    let mut uniq: Vec<&ProductId> = ids.iter().collect();
    uniq.sort();
    uniq.dedup();
    ids.iter()
        .map(|id| uniq.binary_search(&id).expect("id present"))
        .collect()
}

/// Residualizes `q` and `p` on the state columns of `table`.
pub fn partial_out(table: &StateTable, spec: &NuisanceSpec, plan: &FoldPlan) -> Result<ResidualPanel> {
    let keys: Vec<(ProductId, usize)> = table
        .rows()
        .iter()
        .map(|r| (r.product_id.clone(), r.period))
        .collect();
    partial_out_design(
        &table.design(),
        &table.design_names(),
        &keys,
        &table.outcome(),
        &table.treatment(),
        spec,
        plan,
    )
}

/// Matrix-level partialling-out. Rows are first put in `(product, period)`
/// order so results do not depend on input row order. For each fold the Q
/// and P learners are fit on the other folds and predict the held-out one;
/// a full-sample plan fits and predicts on all rows.
pub fn partial_out_design(
    x: &Matrix,
    names: &[String],
    keys: &[(ProductId, usize)],
    q: &[f64],
    p: &[f64],
    spec: &NuisanceSpec,
    plan: &FoldPlan,
) -> Result<ResidualPanel> {
    let n = x.nrows();
    for (name, len) in [("keys", keys.len()), ("q", q.len()), ("p", p.len())] {
        if len != n {
            return Err(Error::Length(format!("{name} has {len} entries for {n} rows")));
        }
    }
    if names.len() != x.ncols() {
        return Err(Error::dim("design labels", x.ncols(), names.len()));
    }
    spec.q.validate()?;
    spec.p.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut folds = Vec::with_capacity(n);
    for &i in &order {
        let f = plan.fold_of(&keys[i].0).ok_or_else(|| {
            Error::Structure(format!("product {} is not covered by the fold plan", keys[i].0))
        })?;
        folds.push(f);
    }
    let xs = x.select_rows(&order);
    let qs: Vec<f64> = order.iter().map(|&i| q[i]).collect();
    let ps: Vec<f64> = order.iter().map(|&i| p[i]).collect();
    let n_sim = names.iter().filter(|l| l.starts_with("cs")).count();

    let l = plan.n_folds();
    let mut tasks = Vec::with_capacity(2 * l);
    for fold in 0..l {
        let (train, test): (Vec<usize>, Vec<usize>) = if plan.is_full_sample() {
            ((0..n).collect(), (0..n).collect())
        } else {
            (0..n).partition(|&i| folds[i] != fold)
        };
        for target in 0..2 {
            let s = if target == 0 { &spec.q } else { &spec.p };
            let needed = s.min_rows(x.ncols(), n_sim);
            if train.len() < needed {
                return Err(Error::FoldSize {
                    fold,
                    rows: train.len(),
                    needed,
                });
            }
            let seed = derive_seed(s.trees.seed, (2 * fold + target) as u64);
            tasks.push((fold, target, s.with_seed(seed), train.clone(), test.clone()));
        }
    }
    let run = |(_, target, s, train, test): &(usize, usize, LearnerSpec, Vec<usize>, Vec<usize>)| {
        let y = if *target == 0 { &qs } else { &ps };
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fitted = learners::fit(s, &xs.select_rows(train), names, &ytr)?;
        fitted.predict(&xs.select_rows(test))
    };

    #[cfg(feature = "parallel")]
    let preds: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        tasks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let preds: Vec<Result<Vec<f64>>> = tasks.iter().map(run).collect();

    let mut q_hat = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    for (task, pred) in tasks.iter().zip(preds) {
        let pred = pred?;
        let dst = if task.1 == 0 { &mut q_hat } else { &mut p_hat };
        for (&i, v) in task.4.iter().zip(pred) {
            dst[i] = v;
        }
    }
    let q_perp: Vec<f64> = qs.iter().zip(&q_hat).map(|(a, b)| a - b).collect();
    let p_perp: Vec<f64> = ps.iter().zip(&p_hat).map(|(a, b)| a - b).collect();
    let product_ids: Vec<ProductId> = order.iter().map(|&i| keys[i].0.clone()).collect();
    let periods = order.iter().map(|&i| keys[i].1).collect();
    let clusters = dense_clusters(&product_ids);
    Ok(ResidualPanel {
        product_ids,
        periods,
        clusters,
        folds,
        q_hat,
        p_hat,
        q_perp,
        p_perp,
        order,
    })
}

/// How effect modifiers are built from a state table.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModifierSpec {
    pub lags: bool,
    pub similarities: bool,
    /// Rescale similarities to unit variance as well as centering them.
    pub scale_similarities: bool,
}

impl Default for ModifierSpec {
    fn default() -> Self {
        ModifierSpec {
            lags: true,
            similarities: true,
            scale_similarities: false,
        }
    }
}

/// `(1, q_lag_std, p_lag_std, cs_0 − mean, …)` per residual row.
#[derive(Debug, Clone, PartialEq)]
pub struct Modifiers {
    pub labels: Vec<String>,
    pub matrix: Matrix,
    /// Centers and scales of every non-constant column.
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
}

fn center_scale(col: &mut [f64], scale: bool) -> (f64, f64) {
    let m = stats::mean(col);
    let s = if scale {
        let sd = libm::sqrt(stats::variance(col));
        if sd > 0.0 && sd.is_finite() {
            sd
        } else {
            1.0
        }
    } else {
        1.0
    };
    for v in col.iter_mut() {
        *v = (*v - m) / s;
    }
    (m, s)
}

/// Modifiers aligned with `res` (which must come from `table`).
pub fn build_modifiers(table: &StateTable, res: &ResidualPanel, spec: ModifierSpec) -> Result<Modifiers> {
    if res.order.len() != table.len() || res.order.iter().any(|&i| i >= table.len()) {
        return Err(Error::dim("modifier rows", table.len(), res.order.len()));
    }
    let rows = table.rows();
    let mut labels = vec![CENTERCEPT.to_string()];
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut scaled = Vec::new();
    if spec.lags {
        labels.push(LAGGED_QUANTITY.to_string());
        cols.push(res.order.iter().map(|&i| rows[i].state.q_lag).collect());
        labels.push(LAGGED_PRICE.to_string());
        cols.push(res.order.iter().map(|&i| rows[i].state.p_lag).collect());
        scaled.extend([true, true]);
    }
    if spec.similarities {
        for k in 0..table.similarity_names().len() {
            labels.push(similarity_label(k));
            cols.push(res.order.iter().map(|&i| rows[i].similarity[k]).collect());
            scaled.push(spec.scale_similarities);
        }
    }
    let mut centers = Vec::with_capacity(cols.len());
    let mut scales = Vec::with_capacity(cols.len());
    for (c, &s) in cols.iter_mut().zip(&scaled) {
        let (m, sd) = center_scale(c, s);
        centers.push(m);
        scales.push(sd);
    }
    let n = res.len();
    let mut matrix = Matrix::zeros(n, labels.len());
    for i in 0..n {
        let row = matrix.row_mut(i);
        row[0] = 1.0;
        for (j, c) in cols.iter().enumerate() {
            row[j + 1] = c[i];
        }
    }
    Ok(Modifiers {
        labels,
        matrix,
        centers,
        scales,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CriticalValue {
    Normal,
    /// Student t with `G − 1` degrees of freedom.
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inference {
    pub level: f64,
    pub critical: CriticalValue,
}

impl Default for Inference {
    fn default() -> Self {
        Inference {
            level: 0.90,
            critical: CriticalValue::Normal,
        }
    }
}

impl Inference {
    fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "confidence level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }

    fn critical_value(&self, n_clusters: usize) -> Result<f64> {
        let prob = 0.5 + 0.5 * self.level;
        match self.critical {
            CriticalValue::Normal => stats::normal_quantile(prob),
            CriticalValue::StudentT => stats::student_t_quantile(prob, (n_clusters - 1) as f64),
        }
    }

    fn p_value(&self, t: f64, n_clusters: usize) -> f64 {
        match self.critical {
            CriticalValue::Normal => stats::normal_two_sided_p(t),
            CriticalValue::StudentT => stats::student_t_two_sided_p(t, (n_clusters - 1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub label: String,
    pub coef: f64,
    pub std_err: f64,
    pub t: f64,
    pub p_value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub covariance: Matrix,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub inference: Inference,
    /// Modifier columns left out for having no variation.
    pub dropped: Vec<String>,
    /// Indices of the estimated columns within the modifier matrix.
    pub kept: Vec<usize>,
}

impl EffectEstimate {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len())
            .map(|i| libm::sqrt(self.covariance[(i, i)].max(0.0)))
            .collect()
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }

    pub fn rows(&self) -> Result<Vec<CoefficientRow>> {
        self.inference.validate()?;
        let z = self.inference.critical_value(self.n_clusters)?;
        Ok(self
            .labels
            .iter()
            .zip(&self.coefficients)
            .zip(self.std_errors())
            .map(|((label, &coef), se)| {
                let t = coef / se;
                CoefficientRow {
                    label: label.clone(),
                    coef,
                    std_err: se,
                    t,
                    p_value: self.inference.p_value(t, self.n_clusters),
                    lo: coef - z * se,
                    hi: coef + z * se,
                }
            })
            .collect())
    }

    /// Restricts a full modifier matrix to the estimated columns.
    pub fn select_modifiers(&self, modifiers: &Matrix) -> Matrix {
        modifiers.select_columns(&self.kept)
    }
}

fn check_residuals(res: &ResidualPanel) -> Result<()> {
    if res.p_perp.len() != res.len() || res.clusters.len() != res.len() {
        return Err(Error::Length("residual vectors differ in length".into()));
    }
    if res.is_empty() {
        return Err(Error::Length("no residual rows".into()));
    }
    Ok(())
}

/// `δ̂ = Σ p⊥ q⊥ / Σ p⊥²` with product-clustered standard error.
pub fn estimate_homogeneous(res: &ResidualPanel, inference: Inference) -> Result<EffectEstimate> {
    check_residuals(res)?;
    inference.validate()?;
    let spp: f64 = res.p_perp.iter().map(|v| v * v).sum();
    if !(spp > 0.0) {
        return Err(Error::Degenerate(
            "treatment residuals have no variation".into(),
        ));
    }
    let spq: f64 = res.p_perp.iter().zip(&res.q_perp).map(|(a, b)| a * b).sum();
    let delta = spq / spp;
    let e: Vec<f64> = res
        .q_perp
        .iter()
        .zip(&res.p_perp)
        .map(|(q, p)| q - delta * p)
        .collect();
    let x = Matrix::from_vec(res.len(), 1, res.p_perp.clone())?;
    let covariance = clustered_covariance(&x, &e, &res.clusters)?;
    Ok(EffectEstimate {
        labels: vec![PRICE_EFFECT.to_string()],
        coefficients: vec![delta],
        covariance,
        n_obs: res.len(),
        n_clusters: res.n_clusters(),
        inference,
        dropped: Vec::new(),
        kept: vec![0],
    })
}

/// Least squares of `q⊥` on `p⊥ × modifiers` (no re-residualization of the
/// modifiers). Non-constant columns without variation are dropped; if only
/// the constant remains the homogeneous estimator is returned under the
/// centercept label.
pub fn estimate_heterogeneous(
    res: &ResidualPanel,
    modifiers: &Modifiers,
    inference: Inference,
) -> Result<EffectEstimate> {
    check_residuals(res)?;
    inference.validate()?;
    let n = res.len();
    let m = &modifiers.matrix;
    if m.nrows() != n {
        return Err(Error::dim("modifier rows", n, m.nrows()));
    }
    if m.ncols() != modifiers.labels.len() {
        return Err(Error::dim("modifier labels", m.ncols(), modifiers.labels.len()));
    }
    let mut kept = vec![0];
    let mut dropped = Vec::new();
    for j in 1..m.ncols() {
        let col = m.column(j);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            dropped.push(modifiers.labels[j].clone());
        } else {
            kept.push(j);
        }
    }
    if kept.len() == 1 {
        let mut est = estimate_homogeneous(res, inference)?;
        est.labels = vec![modifiers.labels[0].clone()];
        est.dropped = dropped;
        return Ok(est);
    }
    let k = kept.len();
    let mut z = Matrix::zeros(n, k);
    for i in 0..n {
        let p = res.p_perp[i];
        let src = m.row(i);
        for (c, &j) in kept.iter().enumerate() {
            z[(i, c)] = p * src[j];
        }
    }
    let labels: Vec<String> = kept.iter().map(|&j| modifiers.labels[j].clone()).collect();
    let fit = least_squares(&z, &res.q_perp)?;
    if !fit.dropped.is_empty() {
        return Err(Error::Rank {
            columns: fit.dropped.iter().map(|&c| labels[c].clone()).collect(),
        });
    }
    let covariance = clustered_covariance(&z, &fit.residuals, &res.clusters).map_err(|e| match e {
        Error::Rank { columns } => Error::Rank {
            columns: columns
                .iter()
                .filter_map(|c| c.strip_prefix("column ").and_then(|i| i.parse::<usize>().ok()))
                .map(|i| labels[i].clone())
                .collect(),
        },
        other => other,
    })?;
    Ok(EffectEstimate {
        labels,
        coefficients: fit.coefficients,
        covariance,
        n_obs: n,
        n_clusters: res.n_clusters(),
        inference,
        dropped,
        kept,
    })
}

fn bread(x: &Matrix) -> Result<Matrix> {
    let k = x.ncols();
    let fit = least_squares(x, &vec![0.0; x.nrows()])?;
    if !fit.dropped.is_empty() {
        return Err(Error::Rank {
            columns: fit.dropped.iter().map(|c| format!("column {c}")).collect(),
        });
    }
    let inv = fit.xtx_inverse();
    debug_assert_eq!(inv.nrows(), k);
    Ok(inv)
}

fn sandwich(bread: &Matrix, meat: &Matrix, factor: f64) -> Result<Matrix> {
    let mut v = bread.matmul(meat)?.matmul(bread)?;
    v.symmetrize();
    let k = v.nrows();
    for i in 0..k {
        for j in 0..k {
            v[(i, j)] *= factor;
        }
    }
    Ok(v)
}

/// `(XᵀX)⁻¹ (Σ_g X_gᵀ e_g e_gᵀ X_g) (XᵀX)⁻¹ · G/(G−1) · (n−1)/(n−k)`.
pub fn clustered_covariance(x: &Matrix, e: &[f64], clusters: &[usize]) -> Result<Matrix> {
    let (n, k) = (x.nrows(), x.ncols());
    if e.len() != n {
        return Err(Error::dim("clustered covariance residuals", n, e.len()));
    }
    if clusters.len() != n {
        return Err(Error::dim("clustered covariance clusters", n, clusters.len()));
    }
    if n <= k {
        return Err(Error::Length(format!(
            "{n} observations cannot support {k} coefficients"
        )));
    }
    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, &g) in clusters.iter().enumerate() {
        let s = scores.entry(g).or_insert_with(|| vec![0.0; k]);
        for (a, xv) in s.iter_mut().zip(x.row(i)) {
            *a += xv * e[i];
        }
    }
    let g = scores.len();
    if g < 2 {
        return Err(Error::Structure(format!(
            "clustered covariance needs at least 2 clusters, found {g}"
        )));
    }
    let b = bread(x)?;
    let mut meat = Matrix::zeros(k, k);
    for s in scores.values() {
        for a in 0..k {
            for c in 0..k {
                meat[(a, c)] += s[a] * s[c];
            }
        }
    }
    let factor = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64);
    sandwich(&b, &meat, factor)
}

/// Heteroskedasticity-robust (HC0) covariance without small-sample factor.
pub fn hc_covariance(x: &Matrix, e: &[f64]) -> Result<Matrix> {
    let (n, k) = (x.nrows(), x.ncols());
    if e.len() != n {
        return Err(Error::dim("robust covariance residuals", n, e.len()));
    }
    let b = bread(x)?;
    let mut meat = Matrix::zeros(k, k);
    for (i, r) in x.rows().enumerate() {
        let w = e[i] * e[i];
        for a in 0..k {
            for c in 0..k {
                meat[(a, c)] += w * r[a] * r[c];
            }
        }
    }
    sandwich(&b, &meat, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `W = θ̂ᵀ V⁻¹ θ̂` over the labelled subset, χ² with `|subset|` df.
pub fn wald_joint_test(est: &EffectEstimate, subset: &[&str]) -> Result<WaldTest> {
    if subset.is_empty() {
        return Err(Error::Config("Wald test needs at least one coefficient".into()));
    }
    let mut idx = Vec::with_capacity(subset.len());
    for label in subset {
        let i = est.labels.iter().position(|l| l == label).ok_or_else(|| {
            Error::Config(format!("coefficient {label:?} is not part of the estimate"))
        })?;
        idx.push(i);
    }
    let theta: Vec<f64> = idx.iter().map(|&i| est.coefficients[i]).collect();
    let v = est.covariance.select_rows(&idx).select_columns(&idx);
    let l = cholesky(&v).map_err(|_| {
        Error::Degenerate("covariance block of the tested coefficients is singular".into())
    })?;
    let sol = cholesky_solve(&l, &theta);
    let statistic = theta.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    let df = idx.len();
    Ok(WaldTest {
        statistic,
        df,
        p_value: stats::chi_square_sf(statistic, df as f64),
    })
}

/// Labels of the similarity coefficients in an estimate.
pub fn similarity_labels(est: &EffectEstimate) -> Vec<&str> {
    est.labels
        .iter()
        .filter(|l| l.starts_with("Cluster Similarity"))
        .map(String::as_str)
        .collect()
}

/// Every coefficient except the centercept.
pub fn modifier_labels(est: &EffectEstimate) -> Vec<&str> {
    est.labels
        .iter()
        .filter(|l| l.as_str() != CENTERCEPT)
        .map(String::as_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortedEffect {
    /// `rank / n`, rank starting at 1.
    pub index: f64,
    pub alpha: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `α̂(s_i) = x_iᵀθ̂` with pointwise bands, sorted ascending. `modifiers`
/// must hold exactly the estimated columns (see
/// [`EffectEstimate::select_modifiers`]).
pub fn sorted_effects(est: &EffectEstimate, modifiers: &Matrix, level: f64) -> Result<Vec<SortedEffect>> {
    let k = est.coefficients.len();
    if modifiers.ncols() != k {
        return Err(Error::dim("sorted effects modifiers", k, modifiers.ncols()));
    }
    let inf = Inference {
        level,
        ..est.inference
    };
    inf.validate()?;
    let z = inf.critical_value(est.n_clusters)?;
    let n = modifiers.nrows();
    let mut out: Vec<SortedEffect> = modifiers
        .rows()
        .map(|x| {
            let alpha: f64 = x.iter().zip(&est.coefficients).map(|(a, b)| a * b).sum();
            let vx = est.covariance.matvec(x).expect("square covariance");
            let var: f64 = x.iter().zip(&vx).map(|(a, b)| a * b).sum();
            let se = libm::sqrt(var.max(0.0));
            SortedEffect {
                index: 0.0,
                alpha,
                std_err: se,
                lo: alpha - z * se,
                hi: alpha + z * se,
            }
        })
        .collect();
    out.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    for (r, e) in out.iter_mut().enumerate() {
        e.index = (r + 1) as f64 / n as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwlCheck {
    pub dml: f64,
    pub ols: f64,
}

/// Residual-on-residual slope after full-sample linear partialling of `q`
/// and `p` on `[1, x]`, next to the coefficient on `p` in the joint least
/// squares of `q` on `[1, p, x]`.
pub fn rank_fwl_check(x: &Matrix, q: &[f64], p: &[f64]) -> Result<FwlCheck> {
    let n = x.nrows();
    if q.len() != n || p.len() != n {
        return Err(Error::Length("FWL check vectors differ in length".into()));
    }
    let xi = x.with_intercept();
    let pcol = Matrix::from_vec(n, 1, p.to_vec())?;
    let joint_x = pcol.with_intercept().hstack(x)?;
    let joint = least_squares(&joint_x, q)?;
    if !joint.dropped.is_empty() {
        return Err(Error::Rank {
            columns: joint
                .dropped
                .iter()
                .map(|&c| match c {
                    0 => "intercept".to_string(),
                    1 => "p".to_string(),
                    c => format!("x{}", c - 2),
                })
                .collect(),
        });
    }
    let rq = least_squares(&xi, q)?.residuals;
    let rp = least_squares(&xi, p)?.residuals;
    let spp: f64 = rp.iter().map(|v| v * v).sum();
    if !(spp > 0.0) {
        return Err(Error::Degenerate("treatment is explained exactly by the state".into()));
    }
    let spq: f64 = rp.iter().zip(&rq).map(|(a, b)| a * b).sum();
    Ok(FwlCheck {
        dml: spq / spp,
        ols: joint.coefficients[1],
    })
}
