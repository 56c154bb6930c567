//! Nuisance regression learners behind one fit/predict interface.
//!
//! * `Linear`: OLS with an intercept, solved by Householder QR. Columns that
//!   are linearly dependent on earlier ones are dropped and reported.
//! * `LinearInteractions`: `Linear` on the design extended by products of
//!   the lagged signals with every similarity column.
//! * `BoostedTrees`: stagewise squared-loss gradient boosting of depth-limited
//!   regression trees with exact greedy split search.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{least_squares, Matrix};
use crate::panel::{P_LAG, Q_LAG};
use crate::rng;
use crate::stats::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LearnerKind {
    Linear,
    LinearInteractions,
    BoostedTrees,
}

/// Columns named in `left` are multiplied with every column whose label
/// starts with `right_prefix`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct InteractionRule {
    pub left: Vec<String>,
    pub right_prefix: String,
}

impl Default for InteractionRule {
    fn default() -> Self {
        InteractionRule {
            left: vec![Q_LAG.to_string(), P_LAG.to_string()],
            right_prefix: "cs".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EarlyStopping {
    pub validation_fraction: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TreeParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            n_trees: 300,
            learning_rate: 0.05,
            max_depth: 3,
            min_samples_leaf: 20,
            subsample: 0.8,
            seed: 0,
            early_stopping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub interactions: InteractionRule,
    #[cfg_attr(feature = "serde", serde(default))]
    pub trees: TreeParams,
}

impl LearnerSpec {
    pub fn linear() -> Self {
        LearnerSpec {
            kind: LearnerKind::Linear,
            interactions: InteractionRule::default(),
            trees: TreeParams::default(),
        }
    }

    pub fn linear_interactions() -> Self {
        LearnerSpec {
            kind: LearnerKind::LinearInteractions,
            ..LearnerSpec::linear()
        }
    }

    pub fn boosted_trees(trees: TreeParams) -> Self {
        LearnerSpec {
            kind: LearnerKind::BoostedTrees,
            interactions: InteractionRule::default(),
            trees,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.trees.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != LearnerKind::BoostedTrees {
            return Ok(());
        }
        let t = &self.trees;
        if t.n_trees == 0 || t.max_depth == 0 || t.min_samples_leaf == 0 {
            return Err(Error::Config(
                "tree count, depth and minimum leaf size must be positive".into(),
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate must lie in (0, 1], got {}",
                t.learning_rate
            )));
        }
        if !(t.subsample > 0.0 && t.subsample <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction must lie in (0, 1], got {}",
                t.subsample
            )));
        }
        if let Some(es) = t.early_stopping {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) || es.patience == 0 {
                return Err(Error::Config("invalid early-stopping settings".into()));
            }
        }
        Ok(())
    }

    /// Smallest training set the learner accepts for `p` input columns.
    pub fn min_rows(&self, p: usize, n_similarity: usize) -> usize {
        match self.kind {
            LearnerKind::Linear => p + 2,
            LearnerKind::LinearInteractions => p + self.interactions.left.len() * n_similarity + 2,
            LearnerKind::BoostedTrees => 2 * self.trees.min_samples_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `intercept` followed by the (expanded) design labels.
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Labels of columns dropped as linearly dependent.
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A regression tree; node 0 is the root. Rows with `x[feature] <= threshold`
/// go left.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn new(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Config("a tree needs at least one node".into()));
        }
        for n in &nodes {
            if let TreeNode::Split { left, right, .. } = n {
                if *left >= nodes.len() || *right >= nodes.len() {
                    return Err(Error::Config("tree child index out of range".into()));
                }
            }
        }
        Ok(RegressionTree { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    fn predict_cols(&self, cols: &[Vec<f64>], row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if cols[feature][row] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// `prediction = base + learning_rate · Σ tree(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Training MSE after each stage, stage 0 being the constant fit.
    pub train_loss: Vec<f64>,
}

impl TreeEnsemble {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base
            + self.learning_rate * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Linear(LinearModel),
    Trees(TreeEnsemble),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedLearner {
    kind: LearnerKind,
    model: FittedModel,
    feature_labels: Vec<String>,
    interactions: InteractionRule,
}

impl FittedLearner {
    /// Wraps a hand-built ensemble, mostly for inspection and tests.
    pub fn from_ensemble(ensemble: TreeEnsemble, feature_labels: Vec<String>) -> Self {
        FittedLearner {
            kind: LearnerKind::BoostedTrees,
            model: FittedModel::Trees(ensemble),
            feature_labels,
            interactions: InteractionRule::default(),
        }
    }

    pub fn kind(&self) -> LearnerKind {
        self.kind
    }

    pub fn model(&self) -> &FittedModel {
        &self.model
    }

    pub fn feature_labels(&self) -> &[String] {
        &self.feature_labels
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.ncols() != self.feature_labels.len() {
            return Err(Error::dim(
                "predict",
                self.feature_labels.len(),
                x.ncols(),
            ));
        }
        match &self.model {
            FittedModel::Linear(m) => {
                let design = if self.kind == LearnerKind::LinearInteractions {
                    expand_interactions(x, &self.feature_labels, &self.interactions)?.0
                } else {
                    x.clone()
                };
                let b = &m.coefficients;
                Ok(design
                    .rows()
                    .map(|r| b[0] + r.iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>())
                    .collect())
            }
            FittedModel::Trees(e) => Ok(x.rows().map(|r| e.predict_row(r)).collect()),
        }
    }
}

pub fn fit(spec: &LearnerSpec, x: &Matrix, labels: &[String], y: &[f64]) -> Result<FittedLearner> {
    spec.validate()?;
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::dim("fit targets", n, y.len()));
    }
    if labels.len() != p {
        return Err(Error::dim("fit labels", p, labels.len()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite regression target".into()));
    }
    let model = match spec.kind {
        LearnerKind::Linear | LearnerKind::LinearInteractions => {
            let (design, names) = if spec.kind == LearnerKind::LinearInteractions {
                expand_interactions(x, labels, &spec.interactions)?
            } else {
                (x.clone(), labels.to_vec())
            };
            if n <= design.ncols() + 1 {
                return Err(Error::Length(format!(
                    "linear fit needs more rows than columns: {n} rows, {} columns",
                    design.ncols() + 1
                )));
            }
            let ls = least_squares(&design.with_intercept(), y)?;
            let mut all = Vec::with_capacity(names.len() + 1);
            all.push("intercept".to_string());
            all.extend(names);
            let dropped = ls.dropped.iter().map(|&j| all[j].clone()).collect();
            FittedModel::Linear(LinearModel {
                labels: all,
                coefficients: ls.coefficients,
                dropped,
            })
        }
        LearnerKind::BoostedTrees => {
            if n < 2 * spec.trees.min_samples_leaf {
                return Err(Error::Length(format!(
                    "boosted trees need at least {} rows, got {n}",
                    2 * spec.trees.min_samples_leaf
                )));
            }
            FittedModel::Trees(fit_boosted(&spec.trees, x, y))
        }
    };
    Ok(FittedLearner {
        kind: spec.kind,
        model,
        feature_labels: labels.to_vec(),
        interactions: spec.interactions.clone(),
    })
}

/// Appends `a×b` product columns for every `a` in `rule.left` and every
/// column `b` whose label starts with `rule.right_prefix`.
pub fn expand_interactions(
    x: &Matrix,
    labels: &[String],
    rule: &InteractionRule,
) -> Result<(Matrix, Vec<String>)> {
    if labels.len() != x.ncols() {
        return Err(Error::dim("interaction labels", x.ncols(), labels.len()));
    }
    let mut left = Vec::with_capacity(rule.left.len());
    for name in &rule.left {
        let j = labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::Config(format!("unknown interaction column {name:?}")))?;
        left.push(j);
    }
    let right: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.starts_with(rule.right_prefix.as_str()) && !rule.right_prefix.is_empty())
        .map(|(j, _)| j)
        .collect();
    let extra = left.len() * right.len();
    let mut names = labels.to_vec();
    for &a in &left {
        for &b in &right {
            names.push(format!("{}×{}", labels[a], labels[b]));
        }
    }
    let cols = x.ncols() + extra;
    let mut out = Matrix::zeros(x.nrows(), cols);
    for i in 0..x.nrows() {
        let src = x.row(i);
        let dst = out.row_mut(i);
        dst[..src.len()].copy_from_slice(src);
        let mut c = src.len();
        for &a in &left {
            for &b in &right {
                dst[c] = src[a] * src[b];
                c += 1;
            }
        }
    }
    Ok((out, names))
}

/// `1 − SSE / SST`; negative when worse than predicting the mean.
pub fn r2_score(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::dim("r2_score", y.len(), y_hat.len()));
    }
    if y.len() < 2 {
        return Err(Error::Length("R² needs at least two observations".into()));
    }
    let m = mean(y);
    let sst: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if sst == 0.0 {
        return Err(Error::Degenerate(
            "R² undefined for a constant target".into(),
        ));
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - sse / sst)
}


fn mse(y: &[f64], pred: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| (y[i] - pred[i]) * (y[i] - pred[i])).sum::<f64>() / rows.len() as f64
}

fn fit_boosted(params: &TreeParams, x: &Matrix, y: &[f64]) -> TreeEnsemble {
    let n = x.nrows();
    let p = x.ncols();
    let mut rng = rng::seeded(params.seed);

    // Optional validation hold-out for early stopping.
    let mut train: Vec<usize> = (0..n).collect();
    let mut valid: Vec<usize> = Vec::new();
    if let Some(es) = params.early_stopping {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let n_valid = ((es.validation_fraction * n as f64) as usize).min(n - 2 * params.min_samples_leaf);
        valid = perm[..n_valid].to_vec();
        valid.sort_unstable();
        let mut is_valid = vec![false; n];
        for &i in &valid {
            is_valid[i] = true;
        }
        train = (0..n).filter(|&i| !is_valid[i]).collect();
    }

    let cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j)).collect();
    let order: Vec<Sorted> = cols
        .iter()
        .map(|c| {
            let mut rows: Vec<u32> = train.iter().map(|&i| i as u32).collect();
            rows.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
            let values = rows.iter().map(|&r| c[r as usize]).collect();
            Sorted { rows, values }
        })
        .collect();

    let base = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
    let mut pred = vec![base; n];
    let mut resid = vec![0.0; n];
    let n_train = train.len();
    let n_sub = (libm::round(params.subsample * n_train as f64) as usize)
        .clamp((2 * params.min_samples_leaf).min(n_train), n_train);
    let mut perm = train.clone();
    let mut in_sample = vec![false; n];
    let mut work = Workspace::new(p, n_sub, n);

    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_loss = Vec::with_capacity(params.n_trees + 1);
    train_loss.push(mse(y, &pred, &train));
    let mut best_valid = if valid.is_empty() { f64::INFINITY } else { mse(y, &pred, &valid) };
    let mut best_len = 0;

    for _ in 0..params.n_trees {
        for &i in &train {
            resid[i] = y[i] - pred[i];
        }
        if n_sub < n_train {
            let (chosen, _) = perm.partial_shuffle(&mut rng, n_sub);
            for &i in chosen.iter() {
                in_sample[i] = true;
            }
        } else {
            for &i in &train {
                in_sample[i] = true;
            }
        }
        work.load(&order, &resid, &in_sample);
        for f in in_sample.iter_mut() {
            *f = false;
        }
        let tree = grow_tree(&mut work, params);
        for i in 0..n {
            pred[i] += params.learning_rate * tree.predict_cols(&cols, i);
        }
        trees.push(tree);
        train_loss.push(mse(y, &pred, &train));
        if let Some(es) = params.early_stopping {
            let v = mse(y, &pred, &valid);
            if v < best_valid {
                best_valid = v;
                best_len = trees.len();
            } else if trees.len() - best_len >= es.patience {
                break;
            }
        }
    }
    if params.early_stopping.is_some() {
        trees.truncate(best_len);
        train_loss.truncate(best_len + 1);
    }
    TreeEnsemble {
        base,
        learning_rate: params.learning_rate,
        trees,
        train_loss,
    }
}

/// Training rows of one feature in ascending value order.
struct Sorted {
    rows: Vec<u32>,
    values: Vec<f64>,
}

/// Per-feature copies of the subsample, sorted by feature value. Rows of a
/// tree node occupy the same contiguous range in every feature.
struct Workspace {
    len: usize,
    rows: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
    resid: Vec<Vec<f64>>,
    scratch_rows: Vec<u32>,
    scratch_values: Vec<f64>,
    scratch_resid: Vec<f64>,
    go_left: Vec<bool>,
    /// `inv[c] = 1/c`.
    inv: Vec<f64>,
}

impl Workspace {
    fn new(p: usize, n_sub: usize, n: usize) -> Self {
        Workspace {
            len: n_sub,
            rows: vec![vec![0; n_sub]; p],
            values: vec![vec![0.0; n_sub]; p],
            resid: vec![vec![0.0; n_sub]; p],
            scratch_rows: vec![0; n_sub],
            scratch_values: vec![0.0; n_sub],
            scratch_resid: vec![0.0; n_sub],
            go_left: vec![false; n],
            inv: (0..=n_sub)
                .map(|c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                .collect(),
        }
    }

    /// Copies the `len` sampled rows of every feature, keeping sort order.
    fn load(&mut self, order: &[Sorted], resid: &[f64], in_sample: &[bool]) {
        for (f, ord) in order.iter().enumerate() {
            let rows = &mut self.rows[f][..self.len];
            let values = &mut self.values[f][..self.len];
            let res = &mut self.resid[f][..self.len];
            let mut w = 0;
            for (&r, &v) in ord.rows.iter().zip(&ord.values) {
                if in_sample[r as usize] {
                    rows[w] = r;
                    values[w] = v;
                    res[w] = resid[r as usize];
                    w += 1;
                }
            }
            debug_assert_eq!(w, self.len);
        }
    }

    fn len(&self) -> usize {
        self.len
    }

    /// Stable partition of `start..end` in every feature by `go_left`.
    fn partition(&mut self, start: usize, end: usize) {
        let go_left = &self.go_left;
        for f in 0..self.rows.len() {
            let rows = &mut self.rows[f][start..end];
            let values = &mut self.values[f][start..end];
            let res = &mut self.resid[f][start..end];
            let (mut w, mut o) = (0, 0);
            for i in 0..rows.len() {
                let (r, v, e) = (rows[i], values[i], res[i]);
                if go_left[r as usize] {
                    rows[w] = r;
                    values[w] = v;
                    res[w] = e;
                    w += 1;
                } else {
                    self.scratch_rows[o] = r;
                    self.scratch_values[o] = v;
                    self.scratch_resid[o] = e;
                    o += 1;
                }
            }
            rows[w..].copy_from_slice(&self.scratch_rows[..o]);
            values[w..].copy_from_slice(&self.scratch_values[..o]);
            res[w..].copy_from_slice(&self.scratch_resid[..o]);
        }
    }
}

struct Candidate {
    feature: usize,
    /// Number of rows sent left, in the chosen feature's order.
    left_count: usize,
    threshold: f64,
}

/// Exact greedy search over one node's range: split between consecutive
/// distinct values, variance-reduction gain, both children ≥ `min_leaf`.
fn best_split(work: &Workspace, start: usize, end: usize, min_leaf: usize) -> Option<Candidate> {
    let count = end - start;
    if count < 2 * min_leaf {
        return None;
    }
    let total: f64 = work.resid[0][start..end].iter().sum();
    let parent = total * total / count as f64;
    let mut best_gain = 0.0;
    let mut best: Option<Candidate> = None;
    for f in 0..work.rows.len() {
        let values = &work.values[f][start..end];
        let res = &work.resid[f][start..end];
        let mut left_sum: f64 = res[..min_leaf - 1].iter().sum();
        // candidate i sends rows [0, i) left
        let pairs = values[min_leaf - 1..=count - min_leaf].windows(2);
        let added = &res[min_leaf - 1..count - min_leaf];
        let inv_left = &work.inv[min_leaf..=count - min_leaf];
        let inv_right = work.inv[min_leaf..=count - min_leaf].iter().rev();
        for (k, (((w, &e), &il), &ir)) in pairs.zip(added).zip(inv_left).zip(inv_right).enumerate() {
            left_sum += e;
            let (last, v) = (w[0], w[1]);
            if !(v > last) {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum * il + right_sum * right_sum * ir - parent;
            if gain > best_gain {
                best_gain = gain;
                let mid = last + 0.5 * (v - last);
                best = Some(Candidate {
                    feature: f,
                    left_count: min_leaf + k,
                    threshold: if mid >= v { last } else { mid },
                });
            }
        }
    }
    best
}

/// Grows one tree level by level on the loaded subsample.
fn grow_tree(work: &mut Workspace, params: &TreeParams) -> RegressionTree {
    let min_leaf = params.min_samples_leaf;
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    // (node, start, end)
    let mut frontier = vec![(0usize, 0usize, work.len())];
    let mut leaves = Vec::new();

    for _depth in 0..params.max_depth {
        let mut next = Vec::new();
        for &(nd, start, end) in &frontier {
            let Some(c) = best_split(work, start, end, min_leaf) else {
                leaves.push((nd, start, end));
                continue;
            };
            let mid = start + c.left_count;
            for &r in &work.rows[c.feature][start..mid] {
                work.go_left[r as usize] = true;
            }
            work.partition(start, end);
            for &r in &work.rows[c.feature][start..mid] {
                work.go_left[r as usize] = false;
            }
            let left = nodes.len();
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes[nd] = TreeNode::Split {
                feature: c.feature,
                threshold: c.threshold,
                left,
                right: left + 1,
            };
            next.push((left, start, mid));
            next.push((left + 1, mid, end));
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    leaves.extend(frontier);
    for (nd, start, end) in leaves {
        let value = if end > start {
            work.resid[0][start..end].iter().sum::<f64>() / (end - start) as f64
        } else {
            0.0
        };
        nodes[nd] = TreeNode::Leaf { value };
    }
    RegressionTree { nodes }
}
