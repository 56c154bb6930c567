//! Product × period panel of quantity and price signals.
//!
//! `q` is the log inverse time-averaged sales rank and `p` the log
//! time-averaged price. Observations are kept sorted by `(product, period)`
//! and every product must cover the same periods `0..n_periods`.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProductId(pub String);

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProductId {
    fn from(s: &str) -> Self {
        ProductId(s.to_owned())
    }
}

impl From<String> for ProductId {
    fn from(s: String) -> Self {
        ProductId(s)
    }
}

/// Product-level feature groups derived from embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FeatureKind {
    Embedding,
    Similarity,
    Pca,
}

impl FeatureKind {
    /// Column-name prefix used for this block (`emb0`, `cs0`, `pc0`, ...).
    pub fn prefix(self) -> &'static str {
        match self {
            FeatureKind::Embedding => "emb",
            FeatureKind::Similarity => "cs",
            FeatureKind::Pca => "pc",
        }
    }

    pub fn column_names(self, k: usize) -> Vec<String> {
        (0..k).map(|i| format!("{}{i}", self.prefix())).collect()
    }

    /// Recognizes `emb<k>`, `cs<k>` and `pc<k>` column names.
    pub fn from_column_name(name: &str) -> Option<FeatureKind> {
        for kind in [FeatureKind::Embedding, FeatureKind::Similarity, FeatureKind::Pca] {
            if let Some(rest) = name.strip_prefix(kind.prefix()) {
                if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                    return Some(kind);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub kind: FeatureKind,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub product_id: ProductId,
    pub period: usize,
    pub q: f64,
    pub p: f64,
    pub tabular_controls: Vec<f64>,
    /// Concatenation of the dataset's feature blocks, in block order.
    pub embedding_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<PanelObservation>,
    products: Vec<ProductId>,
    n_periods: usize,
    tabular_names: Vec<String>,
    blocks: Vec<FeatureBlock>,
}

impl PanelDataset {
    /// Sorts and validates observations into a balanced panel.
    pub fn new(
        mut observations: Vec<PanelObservation>,
        tabular_names: Vec<String>,
        blocks: Vec<FeatureBlock>,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Structure("panel has no observations".into()));
        }
        observations.sort_by(|a, b| {
            a.product_id
                .cmp(&b.product_id)
                .then(a.period.cmp(&b.period))
        });
        let width: usize = blocks.iter().map(|b| b.names.len()).sum();
        for o in &observations {
            if !o.q.is_finite() || !o.p.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite signal for product {} period {}",
                    o.product_id, o.period
                )));
            }
            if o.tabular_controls.len() != tabular_names.len() {
                return Err(Error::dim(
                    "tabular controls",
                    tabular_names.len(),
                    o.tabular_controls.len(),
                ));
            }
            if o.embedding_features.len() != width {
                return Err(Error::dim(
                    "embedding features",
                    width,
                    o.embedding_features.len(),
                ));
            }
        }
        let mut products: Vec<ProductId> = Vec::new();
        let mut n_periods = None;
        let mut start = 0;
        while start < observations.len() {
            let id = &observations[start].product_id;
            let mut end = start;
            while end < observations.len() && observations[end].product_id == *id {
                end += 1;
            }
            for (expected, o) in observations[start..end].iter().enumerate() {
                if o.period != expected {
                    let what = if o.period < expected {
                        "duplicate"
                    } else {
                        "missing"
                    };
                    return Err(Error::Structure(format!(
                        "{what} period for product {id}: expected {expected}, found {}",
                        o.period
                    )));
                }
            }
            let len = end - start;
            match n_periods {
                None => n_periods = Some(len),
                Some(t) if t != len => {
                    return Err(Error::Structure(format!(
                        "unbalanced panel: product {id} has {len} periods, expected {t}"
                    )))
                }
                _ => {}
            }
            products.push(id.clone());
            start = end;
        }
        Ok(PanelDataset {
            observations,
            products,
            n_periods: n_periods.unwrap_or(0),
            tabular_names,
            blocks,
        })
    }

    pub fn observations(&self) -> &[PanelObservation] {
        &self.observations
    }

    pub fn products(&self) -> &[ProductId] {
        &self.products
    }

    pub fn n_products(&self) -> usize {
        self.products.len()
    }

    /// Number of periods per product, `T + 1`.
    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn tabular_names(&self) -> &[String] {
        &self.tabular_names
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    /// Tabular names followed by every block's names.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.tabular_names.clone();
        for b in &self.blocks {
            names.extend(b.names.iter().cloned());
        }
        names
    }

    /// Offset into `embedding_features` and the block of the given kind.
    pub fn block(&self, kind: FeatureKind) -> Option<(usize, &FeatureBlock)> {
        let mut offset = 0;
        for b in &self.blocks {
            if b.kind == kind {
                return Some((offset, b));
            }
            offset += b.names.len();
        }
        None
    }

    /// All periods of the `index`-th product, in period order.
    pub fn product_series(&self, index: usize) -> &[PanelObservation] {
        let t = self.n_periods;
        &self.observations[index * t..(index + 1) * t]
    }

    /// Product-level feature values (first period) for one block,
    /// `n_products × width`.
    pub fn product_block(&self, kind: FeatureKind) -> Option<Matrix> {
        let (offset, block) = self.block(kind)?;
        let k = block.names.len();
        let mut m = Matrix::zeros(self.n_products(), k);
        for i in 0..self.n_products() {
            let o = &self.product_series(i)[0];
            m.row_mut(i)
                .copy_from_slice(&o.embedding_features[offset..offset + k]);
        }
        Some(m)
    }

    /// Sets a product-level feature block (replacing an existing block of the
    /// same kind); `values` has one row per product in [`Self::products`] order.
    pub fn with_product_features(
        &self,
        kind: FeatureKind,
        names: Vec<String>,
        values: &Matrix,
    ) -> Result<PanelDataset> {
        if values.nrows() != self.n_products() {
            return Err(Error::dim(
                "product feature rows",
                self.n_products(),
                values.nrows(),
            ));
        }
        if values.ncols() != names.len() {
            return Err(Error::dim("product feature names", values.ncols(), names.len()));
        }
        let mut blocks: Vec<FeatureBlock> = Vec::new();
        let mut ranges = Vec::new();
        let mut offset = 0;
        for b in &self.blocks {
            let w = b.names.len();
            if b.kind != kind {
                blocks.push(b.clone());
                ranges.push(offset..offset + w);
            }
            offset += w;
        }
        blocks.push(FeatureBlock { kind, names });
        let mut observations = self.observations.clone();
        let t = self.n_periods;
        for (idx, o) in observations.iter_mut().enumerate() {
            let mut feats = Vec::with_capacity(o.embedding_features.len() + values.ncols());
            for r in &ranges {
                feats.extend_from_slice(&o.embedding_features[r.clone()]);
            }
            feats.extend_from_slice(values.row(idx / t));
            o.embedding_features = feats;
        }
        Ok(PanelDataset {
            observations,
            products: self.products.clone(),
            n_periods: self.n_periods,
            tabular_names: self.tabular_names.clone(),
            blocks,
        })
    }

    /// Keeps the products whose indices are listed (any order).
    pub fn select_products(&self, indices: &[usize]) -> PanelDataset {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let mut observations = Vec::with_capacity(idx.len() * self.n_periods);
        for &i in &idx {
            observations.extend_from_slice(self.product_series(i));
        }
        PanelDataset {
            observations,
            products: idx.iter().map(|&i| self.products[i].clone()).collect(),
            n_periods: self.n_periods,
            tabular_names: self.tabular_names.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

/// Raw tick series of one product.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub product_id: ProductId,
    pub ranks: Vec<f64>,
    pub prices: Vec<f64>,
}

/// How raw ticks are grouped into periods: period `t` averages ticks
/// `t·stride .. t·stride + length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PeriodScheme {
    pub length: usize,
    pub stride: usize,
}

impl PeriodScheme {
    pub fn non_overlapping(length: usize) -> Self {
        PeriodScheme {
            length,
            stride: length,
        }
    }
}

/// Aggregates raw ranks and prices into `q = log(1 / mean rank)` and
/// `p = log(mean price)` per period. The arithmetic mean is taken before
/// the log.
pub fn build_signals(
    raw: &[RawSeries],
    scheme: PeriodScheme,
    n_periods: usize,
) -> Result<PanelDataset> {
    if scheme.length == 0 || scheme.stride == 0 || n_periods == 0 {
        return Err(Error::Config(
            "period length, stride and period count must be positive".into(),
        ));
    }
    let needed = (n_periods - 1) * scheme.stride + scheme.length;
    let mut observations = Vec::with_capacity(raw.len() * n_periods);
    for series in raw {
        if series.ranks.len() != series.prices.len() {
            return Err(Error::Length(format!(
                "product {}: {} rank ticks but {} price ticks",
                series.product_id,
                series.ranks.len(),
                series.prices.len()
            )));
        }
        if series.ranks.len() < needed {
            return Err(Error::Length(format!(
                "product {}: {} ticks, {needed} needed for {n_periods} periods",
                series.product_id,
                series.ranks.len()
            )));
        }
        for (tick, (&r, &pr)) in series.ranks.iter().zip(&series.prices).enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Domain(format!(
                    "product {} tick {tick}: rank must be positive, got {r}",
                    series.product_id
                )));
            }
            if !(pr > 0.0 && pr.is_finite()) {
                return Err(Error::Domain(format!(
                    "product {} tick {tick}: price must be positive, got {pr}",
                    series.product_id
                )));
            }
        }
        for t in 0..n_periods {
            let window = t * scheme.stride..t * scheme.stride + scheme.length;
            let rank = crate::stats::mean(&series.ranks[window.clone()]);
            let price = crate::stats::mean(&series.prices[window]);
            observations.push(PanelObservation {
                product_id: series.product_id.clone(),
                period: t,
                q: -libm::log(rank),
                p: libm::log(price),
                tabular_controls: Vec::new(),
                embedding_features: Vec::new(),
            });
        }
    }
    PanelDataset::new(observations, Vec::new(), Vec::new())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub product_id: ProductId,
    pub period: usize,
    pub dq: f64,
    pub dp: f64,
}

/// First differences `ΔQ_it = Q_it − Q_i,t−1` (and likewise for `P`) for
/// every product and `t ≥ 1`.
pub fn difference_signals(panel: &PanelDataset) -> Result<Vec<DiffRow>> {
    if panel.n_periods() < 2 {
        return Err(Error::Structure(
            "differencing needs at least two periods".into(),
        ));
    }
    let mut out = Vec::with_capacity(panel.n_products() * (panel.n_periods() - 1));
    for i in 0..panel.n_products() {
        for w in panel.product_series(i).windows(2) {
            out.push(DiffRow {
                product_id: w[1].product_id.clone(),
                period: w[1].period,
                dq: w[1].q - w[0].q,
                dp: w[1].p - w[0].p,
            });
        }
    }
    Ok(out)
}

/// Which controls enter the state besides the lagged signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlSet {
    pub embedding: Option<FeatureKind>,
    pub tabular: bool,
}

impl ControlSet {
    pub fn lags_only() -> Self {
        ControlSet {
            embedding: None,
            tabular: false,
        }
    }

    pub fn similarities() -> Self {
        ControlSet {
            embedding: Some(FeatureKind::Similarity),
            tabular: true,
        }
    }
}

/// `S_it = (Q_i,t−1, P_i,t−1, X_it)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub q_lag: f64,
    pub p_lag: f64,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub product_id: ProductId,
    /// Index into the source panel's product list; used as cluster key.
    pub product_index: usize,
    pub period: usize,
    pub state: StateVector,
    pub q: f64,
    pub p: f64,
    /// Similarity features of the product (empty when the panel has none);
    /// kept for effect modifiers regardless of the control set.
    pub similarity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    rows: Vec<StateRow>,
    control_names: Vec<String>,
    similarity_names: Vec<String>,
    products: Vec<ProductId>,
}

pub const Q_LAG: &str = "q_lag";
pub const P_LAG: &str = "p_lag";

impl StateTable {
    pub fn rows(&self) -> &[StateRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn similarity_names(&self) -> &[String] {
        &self.similarity_names
    }

    pub fn products(&self) -> &[ProductId] {
        &self.products
    }

    /// Column labels of [`Self::design`]: `q_lag`, `p_lag`, then controls.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.control_names.len() + 2);
        names.push(Q_LAG.to_string());
        names.push(P_LAG.to_string());
        names.extend(self.control_names.iter().cloned());
        names
    }

    pub fn design(&self) -> Matrix {
        let cols = self.control_names.len() + 2;
        let mut m = Matrix::zeros(self.rows.len(), cols);
        for (i, r) in self.rows.iter().enumerate() {
            let row = m.row_mut(i);
            row[0] = r.state.q_lag;
            row[1] = r.state.p_lag;
            row[2..].copy_from_slice(&r.state.controls);
        }
        m
    }

    pub fn outcome(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.q).collect()
    }

    pub fn treatment(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.p).collect()
    }

    pub fn clusters(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.product_index).collect()
    }

    pub fn similarity_matrix(&self) -> Matrix {
        let k = self.similarity_names.len();
        let mut m = Matrix::zeros(self.rows.len(), k);
        for (i, r) in self.rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r.similarity);
        }
        m
    }
}

/// Assembles one state row per product and period `t ≥ 1`; period 0 only
/// serves as the lag source.
pub fn build_state(panel: &PanelDataset, controls: ControlSet) -> Result<StateTable> {
    if panel.n_periods() < 2 {
        return Err(Error::Structure(
            "state construction needs at least two periods".into(),
        ));
    }
    let embedding = match controls.embedding {
        Some(kind) => {
            let (offset, block) = panel.block(kind).ok_or_else(|| {
                Error::Config(format!(
                    "control set requests {kind:?} features but the panel has none"
                ))
            })?;
            Some((offset, block.names.len(), block.names.clone()))
        }
        None => None,
    };
    let mut control_names = Vec::new();
    if let Some((_, _, names)) = &embedding {
        control_names.extend(names.iter().cloned());
    }
    if controls.tabular {
        control_names.extend(panel.tabular_names().iter().cloned());
    }
    let sim = panel
        .block(FeatureKind::Similarity)
        .map(|(o, b)| (o, b.names.len(), b.names.clone()));
    let similarity_names = sim.as_ref().map(|s| s.2.clone()).unwrap_or_default();

    let mut rows = Vec::with_capacity(panel.n_products() * (panel.n_periods() - 1));
    for i in 0..panel.n_products() {
        for w in panel.product_series(i).windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            let mut c = Vec::with_capacity(control_names.len());
            if let Some((offset, width, _)) = &embedding {
                c.extend_from_slice(&cur.embedding_features[*offset..offset + width]);
            }
            if controls.tabular {
                c.extend_from_slice(&cur.tabular_controls);
            }
            let similarity = match &sim {
                Some((o, k, _)) => cur.embedding_features[*o..o + k].to_vec(),
                None => Vec::new(),
            };
            rows.push(StateRow {
                product_id: cur.product_id.clone(),
                product_index: i,
                period: cur.period,
                state: StateVector {
                    q_lag: prev.q,
                    p_lag: prev.p,
                    controls: c,
                },
                q: cur.q,
                p: cur.p,
                similarity,
            });
        }
    }
    Ok(StateTable {
        rows,
        control_names,
        similarity_names,
        products: panel.products().to_vec(),
    })
}

/// Splits products into two disjoint subsets, each product's full series
/// landing in one of them. `|I₁| = ⌊fraction·N⌋`, plus one more product with
/// probability equal to the fractional remainder.
pub fn split_by_product(
    panel: &PanelDataset,
    fraction: f64,
    seed: u64,
) -> Result<(PanelDataset, PanelDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = panel.n_products();
    if n < 2 {
        return Err(Error::Structure(
            "splitting needs at least two products".into(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let target = fraction * n as f64;
    let mut n1 = libm::floor(target) as usize;
    let remainder = target - n1 as f64;
    if remainder > 0.0 && rng.random::<f64>() < remainder {
        n1 += 1;
    }
    let n1 = n1.clamp(1, n - 1);
    let first = panel.select_products(&order[..n1]);
    let second = panel.select_products(&order[n1..]);
    Ok((first, second))
}

/// Converts a rank-based price effect into a demand elasticity by dividing
/// by the Pareto shape `theta`.
pub fn rank_to_demand_elasticity(delta: f64, theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::Domain(format!(
            "Pareto shape must be positive, got {theta}"
        )));
    }
    Ok(delta / theta)
}
