//! Run configuration, read from and written to TOML.
//!
//! Every section except `[input]` has defaults. Seeds are plain integers;
//! TOML stores integers as signed 64-bit, so seeds must stay below 2^63.

use std::path::{Path, PathBuf};

use demand_dml_core::dml::{CriticalValue, Inference, ModifierSpec, NuisanceSpec};
use demand_dml_core::learners::{LearnerKind, LearnerSpec, TreeParams};
use demand_dml_core::panel::{ControlSet, FeatureKind, PeriodScheme};
use demand_dml_core::sem::SemConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default = "ControlSet::similarities")]
    pub controls: ControlSet,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InputConfig {
    Simulate {
        #[serde(default)]
        sem: SemConfig,
    },
    /// Panel CSV, optionally with a separate per-product embeddings CSV.
    Load {
        panel: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embeddings: Option<PathBuf>,
    },
    /// Raw `product_id,tick,rank,price` ticks aggregated into periods.
    Ticks {
        ticks: PathBuf,
        period_length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
        n_periods: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embeddings: Option<PathBuf>,
    },
}

impl InputConfig {
    pub fn period_scheme(&self) -> Option<PeriodScheme> {
        match self {
            InputConfig::Ticks {
                period_length,
                stride,
                ..
            } => Some(PeriodScheme {
                length: *period_length,
                stride: stride.unwrap_or(*period_length),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fraction: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub target_dim: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            target_dim: 256,
            k: 5,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub q: LearnerSpec,
    pub p: LearnerSpec,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        let spec = LearnerSpec::boosted_trees(TreeParams {
            seed: 3,
            ..TreeParams::default()
        });
        NuisanceConfig {
            q: spec.clone(),
            p: spec,
        }
    }
}

impl NuisanceConfig {
    pub fn spec(&self) -> NuisanceSpec {
        NuisanceSpec {
            q: self.q.clone(),
            p: self.p.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectModel {
    Homogeneous,
    Heterogeneous,
    Both,
}

impl EffectModel {
    pub fn homogeneous(self) -> bool {
        matches!(self, EffectModel::Homogeneous | EffectModel::Both)
    }

    pub fn heterogeneous(self) -> bool {
        matches!(self, EffectModel::Heterogeneous | EffectModel::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub model: EffectModel,
    pub folds: usize,
    pub fold_seed: u64,
    /// `false` fits the nuisances once on the full sample (linear kinds only).
    pub cross_fit: bool,
    pub level: f64,
    pub critical: CriticalValue,
    pub modifiers: ModifierSpec,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            model: EffectModel::Both,
            folds: 5,
            fold_seed: 4,
            cross_fit: true,
            level: 0.9,
            critical: CriticalValue::Normal,
            modifiers: ModifierSpec::default(),
        }
    }
}

impl EstimationConfig {
    pub fn inference(&self) -> Inference {
        Inference {
            level: self.level,
            critical: self.critical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Pareto shape used to turn rank effects into demand elasticities.
    pub theta: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { theta: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    Tabular,
    Pca,
    Similarity,
    Embedding,
}

impl FeatureSet {
    pub fn kind(self) -> Option<FeatureKind> {
        match self {
            FeatureSet::Tabular => None,
            FeatureSet::Pca => Some(FeatureKind::Pca),
            FeatureSet::Similarity => Some(FeatureKind::Similarity),
            FeatureSet::Embedding => Some(FeatureKind::Embedding),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub learners: Vec<LearnerSpec>,
    pub feature_sets: Vec<FeatureSet>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            learners: vec![
                LearnerSpec::linear(),
                LearnerSpec::boosted_trees(TreeParams {
                    seed: 5,
                    ..TreeParams::default()
                }),
            ],
            feature_sets: vec![
                FeatureSet::Tabular,
                FeatureSet::Pca,
                FeatureSet::Similarity,
                FeatureSet::Embedding,
            ],
        }
    }
}

impl RunConfig {
    pub fn simulated(sem: SemConfig) -> Self {
        RunConfig {
            input: InputConfig::Simulate { sem },
            split: SplitConfig::default(),
            compression: CompressionConfig::default(),
            controls: ControlSet::similarities(),
            nuisance: NuisanceConfig::default(),
            estimation: EstimationConfig::default(),
            report: ReportConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.at(path))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative input paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.input {
            InputConfig::Simulate { .. } => {}
            InputConfig::Load { panel, embeddings } => {
                fix(panel);
                if let Some(e) = embeddings {
                    fix(e);
                }
            }
            InputConfig::Ticks {
                ticks, embeddings, ..
            } => {
                fix(ticks);
                if let Some(e) = embeddings {
                    fix(e);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String, CliError> {
        let text = self.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let InputConfig::Simulate { sem } = &self.input {
            sem.validate().map_err(CliError::Core)?;
        }
        if let InputConfig::Ticks {
            period_length,
            stride,
            n_periods,
            ..
        } = &self.input
        {
            if *period_length == 0 || *n_periods < 2 || *stride == Some(0) {
                return bad("ticks input needs period_length ≥ 1, stride ≥ 1 and n_periods ≥ 2".into());
            }
        }
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return bad(format!("split.fraction must lie in (0, 1), got {}", self.split.fraction));
        }
        if self.compression.target_dim == 0 || self.compression.k == 0 {
            return bad("compression.target_dim and compression.k must be positive".into());
        }
        self.nuisance.q.validate().map_err(CliError::Core)?;
        self.nuisance.p.validate().map_err(CliError::Core)?;
        let e = &self.estimation;
        if !(e.level > 0.0 && e.level < 1.0) {
            return bad(format!("estimation.level must lie in (0, 1), got {}", e.level));
        }
        if e.cross_fit && e.folds < 2 {
            return bad("estimation.folds must be at least 2 when cross-fitting".into());
        }
        if !e.cross_fit
            && (self.nuisance.q.kind == LearnerKind::BoostedTrees
                || self.nuisance.p.kind == LearnerKind::BoostedTrees)
        {
            return bad("full-sample partialling out (cross_fit = false) needs linear nuisances".into());
        }
        if !(self.report.theta > 0.0) {
            return bad(format!("report.theta must be positive, got {}", self.report.theta));
        }
        for l in &self.eval.learners {
            l.validate().map_err(CliError::Core)?;
        }
        Ok(())
    }

    /// Every seed the run consumes, by name.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        let mut s = Vec::new();
        if let InputConfig::Simulate { sem } = &self.input {
            s.push(("simulation", sem.seed));
        }
        s.push(("split", self.split.seed));
        s.push(("compression", self.compression.seed));
        s.push(("folds", self.estimation.fold_seed));
        s.push(("nuisance_q", self.nuisance.q.trees.seed));
        s.push(("nuisance_p", self.nuisance.p.trees.seed));
        s
    }
}
