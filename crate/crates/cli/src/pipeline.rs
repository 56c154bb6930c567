//! The end-to-end workflow: split, embedding substitution, compression fit
//! and transform, cross-fitted partialling out, homogeneous and
//! heterogeneous estimation. Also the predictive R² harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use demand_dml_core::compression::{CompressedFeatures, CompressionModel};
use demand_dml_core::dml::{
    build_modifiers, estimate_heterogeneous, estimate_homogeneous, make_folds, partial_out,
    similarity_labels, modifier_labels, sorted_effects, wald_joint_test, EffectEstimate, FoldPlan,
    Modifiers, ResidualPanel, SortedEffect, WaldTest,
};
use demand_dml_core::learners::{fit, r2_score, LearnerKind, LearnerSpec};
use demand_dml_core::panel::{
    build_signals, build_state, split_by_product, FeatureKind, PanelDataset, ProductId,
};
use demand_dml_core::sem::{simulate, GroundTruth};
use demand_dml_core::Matrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{FeatureSet, InputConfig, RunConfig};
use crate::error::{CliError, StageContext};
use crate::io;
use crate::report::{self, R2Row};

pub const STAGES: [&str; 7] = [
    "split",
    "embeddings",
    "compression_fit",
    "compression_transform",
    "partial_out",
    "homogeneous",
    "heterogeneous",
];

pub const TIMINGS_FILE: &str = "timings.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Panel plus where it came from.
pub struct LoadedInput {
    pub panel: PanelDataset,
    pub truth: Option<GroundTruth>,
    /// Human-readable origin of the embedding block, if any.
    pub embedding_source: Option<String>,
    pub files: Vec<InputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

fn hash_file(path: &Path) -> Result<InputFile, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn attach_embeddings(
    panel: PanelDataset,
    path: &Path,
) -> Result<PanelDataset, CliError> {
    let map = io::read_embeddings(path)?;
    let e = io::embeddings_for(path, &map, panel.products())?;
    let names = FeatureKind::Embedding.column_names(e.ncols());
    panel
        .with_product_features(FeatureKind::Embedding, names, &e)
        .map_err(|err| CliError::Core(err).at(path))
}

pub fn load_input(cfg: &RunConfig) -> Result<LoadedInput, CliError> {
    match &cfg.input {
        InputConfig::Simulate { sem } => {
            let (panel, truth) = simulate(sem)?;
            Ok(LoadedInput {
                panel,
                truth: Some(truth),
                embedding_source: Some(format!(
                    "simulated latent-cluster embeddings (dimension {}, seed {})",
                    sem.embedding_dim, sem.seed
                )),
                files: Vec::new(),
            })
        }
        InputConfig::Load { panel, embeddings } => {
            let mut files = vec![hash_file(panel)?];
            let mut data = io::read_panel(panel)?;
            let mut source = data
                .block(FeatureKind::Embedding)
                .map(|_| format!("embedding columns of {}", panel.display()));
            if let Some(e) = embeddings {
                files.push(hash_file(e)?);
                data = attach_embeddings(data, e)?;
                source = Some(format!("embeddings file {}", e.display()));
            }
            Ok(LoadedInput {
                panel: data,
                truth: None,
                embedding_source: source,
                files,
            })
        }
        InputConfig::Ticks {
            ticks,
            n_periods,
            embeddings,
            ..
        } => {
            let mut files = vec![hash_file(ticks)?];
            let raw = io::read_ticks(ticks)?;
            let scheme = cfg.input.period_scheme().expect("ticks input");
            let mut data = build_signals(&raw, scheme, *n_periods)
                .map_err(|e| CliError::Core(e).at(ticks))?;
            let mut source = None;
            if let Some(e) = embeddings {
                files.push(hash_file(e)?);
                data = attach_embeddings(data, e)?;
                source = Some(format!("embeddings file {}", e.display()));
            }
            Ok(LoadedInput {
                panel: data,
                truth: None,
                embedding_source: source,
                files,
            })
        }
    }
}

fn input_path(cfg: &RunConfig) -> Option<&Path> {
    match &cfg.input {
        InputConfig::Simulate { .. } => None,
        InputConfig::Load { panel, .. } => Some(panel),
        InputConfig::Ticks { ticks, .. } => Some(ticks),
    }
}

/// Creates `dir`, refusing to reuse a non-empty directory.
pub fn prepare_output_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::input(
                dir,
                "output directory exists and is not empty; refusing to overwrite",
            ));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `--out` if given, else `$DEMAND_DML_OUTPUT/<hash prefix>`, else
/// `runs/<hash prefix>`.
pub fn resolve_output(out: Option<PathBuf>, root: Option<PathBuf>, hash: &str) -> PathBuf {
    out.unwrap_or_else(|| root.unwrap_or_else(|| PathBuf::from("runs")).join(&hash[..12]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub index: usize,
    pub name: &'static str,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub name: &'static str,
    pub seconds: f64,
}

#[derive(Default)]
struct Recorder {
    stages: Vec<StageRecord>,
    timings: Vec<StageTiming>,
}

impl Recorder {
    fn run<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&mut StageRecord) -> Result<T, CliError>,
    ) -> Result<T, CliError> {
        let index = STAGES.iter().position(|s| *s == name).expect("known stage") + 1;
        let mut rec = StageRecord {
            index,
            name,
            status: "done",
            note: None,
            artifacts: Vec::new(),
        };
        let start = Instant::now();
        let out = f(&mut rec)?;
        self.timings.push(StageTiming {
            name,
            seconds: start.elapsed().as_secs_f64(),
        });
        self.stages.push(rec);
        Ok(out)
    }

    fn skip(&mut self, name: &'static str, note: impl Into<String>) {
        self.run(name, |r| {
            r.status = "skipped";
            r.note = Some(note.into());
            Ok(())
        })
        .expect("skip never fails");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest {
    config_hash: String,
    version: &'static str,
    seeds: BTreeMap<String, u64>,
    input_files: Vec<InputFile>,
    stages: Vec<StageRecord>,
    counts: Counts,
    warnings: Vec<String>,
    timings_file: &'static str,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Counts {
    pub products: usize,
    pub periods: usize,
    pub train_products: usize,
    pub estimation_products: usize,
    pub state_rows: usize,
}

/// Product indices of `subset` within `full`.
fn indices_of(full: &PanelDataset, subset: &PanelDataset) -> Vec<usize> {
    let keep: BTreeSet<&ProductId> = subset.products().iter().collect();
    full.products()
        .iter()
        .enumerate()
        .filter(|(_, id)| keep.contains(id))
        .map(|(i, _)| i)
        .collect()
}

/// Replaces the embedding block with the normalized projection and adds the
/// PCA and similarity blocks.
pub fn apply_features(
    panel: &PanelDataset,
    f: &CompressedFeatures,
) -> Result<PanelDataset, CliError> {
    let p = panel.with_product_features(
        FeatureKind::Embedding,
        FeatureKind::Embedding.column_names(f.embeddings.ncols()),
        &f.embeddings,
    )?;
    let p = p.with_product_features(
        FeatureKind::Pca,
        FeatureKind::Pca.column_names(f.pcs.ncols()),
        &f.pcs,
    )?;
    Ok(p.with_product_features(
        FeatureKind::Similarity,
        FeatureKind::Similarity.column_names(f.similarities.ncols()),
        &f.similarities,
    )?)
}

/// Output of steps 1–4.
pub struct Prepared {
    pub input: LoadedInput,
    /// Full panel with compressed features (or the input panel if there are
    /// no embeddings).
    pub panel: PanelDataset,
    pub train: PanelDataset,
    pub test: PanelDataset,
    pub model: Option<CompressionModel>,
}

fn prepare(
    cfg: &RunConfig,
    rec: &mut Recorder,
    out: Option<&Path>,
    hash: &str,
) -> Result<Prepared, CliError> {
    let src = input_path(cfg);
    let (input, train, test) = rec.run("split", |r| {
        let input = load_input(cfg).stage("split", src)?;
        let (train, test) = split_by_product(&input.panel, cfg.split.fraction, cfg.split.seed)
            .stage("split", src)?;
        r.note = Some(format!(
            "{} products: {} to the compression sample, {} to the estimation sample",
            input.panel.n_products(),
            train.n_products(),
            test.n_products()
        ));
        if let Some(dir) = out {
            let path = dir.join("split.csv");
            write_split(&path, &train, &test, hash).stage("split", Some(&path))?;
            r.artifacts.push("split.csv".into());
            if let Some(truth) = &input.truth {
                let path = dir.join("truth.csv");
                io::write_truth(&path, truth, hash).stage("split", Some(&path))?;
                r.artifacts.push("truth.csv".into());
            }
        }
        Ok((input, train, test))
    })?;

    let Some(source) = input.embedding_source.clone() else {
        for s in ["embeddings", "compression_fit", "compression_transform"] {
            rec.skip(s, "input has no embeddings");
        }
        let panel = input.panel.clone();
        return Ok(Prepared {
            input,
            panel,
            train,
            test,
            model: None,
        });
    };
    rec.run("embeddings", |r| {
        r.note = Some(format!(
            "embedding fine-tuning is not performed; substituted {source}"
        ));
        Ok(())
    })?;

    let model = rec.run("compression_fit", |r| {
        let e = train
            .product_block(FeatureKind::Embedding)
            .expect("embedding block present");
        let (model, _) = CompressionModel::fit(
            &e,
            cfg.compression.target_dim,
            cfg.compression.k,
            cfg.compression.seed,
        )
        .stage("compression_fit", src)?;
        if !model.warnings.is_empty() {
            r.note = Some(model.warnings.join("; "));
        }
        if let Some(dir) = out {
            let path = dir.join("compression_model.txt");
            io::write_compression_model(&path, &model, hash)
                .stage("compression_fit", Some(&path))?;
            r.artifacts.push("compression_model.txt".into());
        }
        Ok(model)
    })?;

    let (panel, train, test) = rec.run("compression_transform", |r| {
        let e = input
            .panel
            .product_block(FeatureKind::Embedding)
            .expect("embedding block present");
        let f = model.transform(&e).stage("compression_transform", src)?;
        let panel = apply_features(&input.panel, &f).stage("compression_transform", src)?;
        let train = panel.select_products(&indices_of(&panel, &train));
        let test = panel.select_products(&indices_of(&panel, &test));
        if let Some(dir) = out {
            let path = dir.join("features.csv");
            write_features(&path, &panel, &f, hash).stage("compression_transform", Some(&path))?;
            r.artifacts.push("features.csv".into());
        }
        Ok((panel, train, test))
    })?;
    Ok(Prepared {
        input,
        panel,
        train,
        test,
        model: Some(model),
    })
}

fn write_split(
    path: &Path,
    train: &PanelDataset,
    test: &PanelDataset,
    hash: &str,
) -> Result<(), CliError> {
    let mut rows: Vec<(&ProductId, &str)> = train
        .products()
        .iter()
        .map(|p| (p, "compression"))
        .chain(test.products().iter().map(|p| (p, "estimation")))
        .collect();
    rows.sort();
    let mut text = io::header(hash);
    text.push_str("product_id,subset\n");
    for (p, s) in rows {
        text.push_str(&format!("{p},{s}\n"));
    }
    io::write_text(path, &text)
}

/// `product_id,pc*,cs*`.
fn write_features(
    path: &Path,
    panel: &PanelDataset,
    f: &CompressedFeatures,
    hash: &str,
) -> Result<(), CliError> {
    let mut text = io::header(hash);
    let mut head = vec!["product_id".to_string()];
    head.extend(FeatureKind::Pca.column_names(f.pcs.ncols()));
    head.extend(FeatureKind::Similarity.column_names(f.similarities.ncols()));
    text.push_str(&head.join(","));
    text.push('\n');
    for (i, id) in panel.products().iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend(f.pcs.row(i).iter().map(|v| format!("{v}")));
        row.extend(f.similarities.row(i).iter().map(|v| format!("{v}")));
        text.push_str(&row.join(","));
        text.push('\n');
    }
    io::write_text(path, &text)
}

/// Results of steps 5–7.
pub struct Estimates {
    pub residuals: ResidualPanel,
    pub homogeneous: Option<EffectEstimate>,
    pub heterogeneous: Option<Heterogeneous>,
    pub state_rows: usize,
}

pub struct Heterogeneous {
    pub estimate: EffectEstimate,
    pub modifiers: Modifiers,
    pub wald_all: Option<WaldTest>,
    pub wald_similarities: Option<WaldTest>,
    pub sorted: Vec<SortedEffect>,
}

fn fold_plan(cfg: &RunConfig, products: &[ProductId]) -> Result<FoldPlan, CliError> {
    if cfg.estimation.cross_fit {
        Ok(make_folds(products, cfg.estimation.folds, cfg.estimation.fold_seed)?)
    } else {
        Ok(FoldPlan::full_sample(products))
    }
}

fn estimate(
    cfg: &RunConfig,
    rec: &mut Recorder,
    panel: &PanelDataset,
    out: Option<&Path>,
    hash: &str,
    src: Option<&Path>,
) -> Result<Estimates, CliError> {
    let level = cfg.estimation.level;
    let (table, residuals) = rec.run("partial_out", |r| {
        let table = build_state(panel, cfg.controls).stage("partial_out", src)?;
        let plan = fold_plan(cfg, table.products()).stage("partial_out", src)?;
        let res = partial_out(&table, &cfg.nuisance.spec(), &plan).stage("partial_out", src)?;
        r.note = Some(format!(
            "{} state rows, {} products, {}",
            table.len(),
            table.products().len(),
            if plan.is_full_sample() {
                "full-sample nuisances".to_string()
            } else {
                format!("{}-fold cross-fitting", plan.n_folds())
            }
        ));
        if let Some(dir) = out {
            let path = dir.join("residuals.csv");
            io::write_residuals(&path, &res, hash).stage("partial_out", Some(&path))?;
            r.artifacts.push("residuals.csv".into());
        }
        Ok((table, res))
    })?;

    let homogeneous = if cfg.estimation.model.homogeneous() {
        Some(rec.run("homogeneous", |r| {
            let est = estimate_homogeneous(&residuals, cfg.estimation.inference())
                .stage("homogeneous", src)?;
            if let Some(dir) = out {
                write_estimate(dir, "homogeneous", "Homogeneous price effect", &est, hash, level)
                    .stage("homogeneous", Some(dir))?;
                r.artifacts
                    .extend(["homogeneous.csv", "homogeneous.json", "homogeneous.txt"].map(String::from));
            }
            Ok(est)
        })?)
    } else {
        rec.skip("homogeneous", "not requested");
        None
    };

    let heterogeneous = if cfg.estimation.model.heterogeneous() {
        Some(rec.run("heterogeneous", |r| {
            let modifiers = build_modifiers(&table, &residuals, cfg.estimation.modifiers)
                .stage("heterogeneous", src)?;
            let est = estimate_heterogeneous(&residuals, &modifiers, cfg.estimation.inference())
                .stage("heterogeneous", src)?;
            let all = modifier_labels(&est);
            let sims = similarity_labels(&est);
            let wald_all = if all.is_empty() {
                None
            } else {
                Some(wald_joint_test(&est, &all).stage("heterogeneous", src)?)
            };
            let wald_similarities = if sims.is_empty() {
                None
            } else {
                Some(wald_joint_test(&est, &sims).stage("heterogeneous", src)?)
            };
            let sorted = sorted_effects(&est, &est.select_modifiers(&modifiers.matrix), level)
                .stage("heterogeneous", src)?;
            if !est.dropped.is_empty() {
                r.note = Some(format!(
                    "dropped modifiers without variation: {}",
                    est.dropped.join(", ")
                ));
            }
            if let Some(dir) = out {
                write_estimate(
                    dir,
                    "heterogeneous",
                    "Inference on the price effect modifiers",
                    &est,
                    hash,
                    level,
                )
                .stage("heterogeneous", Some(dir))?;
                let wald = report::wald_table(wald_all.as_ref(), wald_similarities.as_ref());
                let path = dir.join("wald.txt");
                io::write_text(&path, &format!("{}{wald}", io::header(hash)))
                    .stage("heterogeneous", Some(&path))?;
                let path = dir.join("sorted_effects.csv");
                io::write_sorted_effects(&path, &sorted, hash).stage("heterogeneous", Some(&path))?;
                r.artifacts.extend(
                    [
                        "heterogeneous.csv",
                        "heterogeneous.json",
                        "heterogeneous.txt",
                        "wald.txt",
                        "sorted_effects.csv",
                    ]
                    .map(String::from),
                );
            }
            Ok(Heterogeneous {
                estimate: est,
                modifiers,
                wald_all,
                wald_similarities,
                sorted,
            })
        })?)
    } else {
        rec.skip("heterogeneous", "not requested");
        None
    };
    Ok(Estimates {
        state_rows: table.len(),
        residuals,
        homogeneous,
        heterogeneous,
    })
}

fn write_estimate(
    dir: &Path,
    stem: &str,
    title: &str,
    est: &EffectEstimate,
    hash: &str,
    level: f64,
) -> Result<(), CliError> {
    io::write_coefficients(&dir.join(format!("{stem}.csv")), est, hash)?;
    io::EstimateJson::new(stem, est, hash)?.write(&dir.join(format!("{stem}.json")))?;
    let text = report::coefficient_table(title, &est.rows()?, level);
    io::write_text(
        &dir.join(format!("{stem}.txt")),
        &format!("{}{text}", io::header(hash)),
    )
}

fn write_elasticity(
    dir: &Path,
    cfg: &RunConfig,
    est: &Estimates,
    hash: &str,
) -> Result<String, CliError> {
    let theta = cfg.report.theta;
    let level = cfg.estimation.level;
    let mut rows = Vec::new();
    for e in est
        .homogeneous
        .iter()
        .chain(est.heterogeneous.as_ref().map(|h| &h.estimate))
    {
        rows.extend(report::report_elasticity(&e.rows()?, theta)?);
    }
    let mut csv = io::header(hash);
    csv.push_str("label,coef,lo,hi,elasticity,elasticity_lo,elasticity_hi\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label, r.coef, r.lo, r.hi, r.elasticity, r.elasticity_lo, r.elasticity_hi
        ));
    }
    io::write_text(&dir.join("elasticity.csv"), &csv)?;
    Ok(report::elasticity_table(&rows, theta, level))
}

/// Summary returned by [`run_pipeline`].
pub struct RunOutput {
    pub dir: PathBuf,
    pub hash: String,
    pub prepared: Prepared,
    pub estimates: Estimates,
    pub timings: Vec<StageTiming>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::input(path, e.to_string()))?;
    text.push('\n');
    io::write_text(path, &text)
}

fn write_config(dir: &Path, cfg: &RunConfig, hash: &str) -> Result<(), CliError> {
    let text = format!("{}{}", io::header(hash), cfg.to_toml()?);
    io::write_text(&dir.join("config.toml"), &text)
}

/// Runs the seven workflow stages and writes the report bundle into `dir`.
///
/// Everything in `dir` except `timings.json` is a deterministic function of
/// the config and the input files.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    prepare_output_dir(dir)?;
    write_config(dir, cfg, &hash)?;
    let mut rec = Recorder::default();
    let prepared = prepare(cfg, &mut rec, Some(dir), &hash)?;
    let src = input_path(cfg);
    let estimates = estimate(cfg, &mut rec, &prepared.test, Some(dir), &hash, src)?;

    let elasticity = write_elasticity(dir, cfg, &estimates, &hash)?;
    let mut report = io::header(&hash);
    if let Some(h) = &estimates.homogeneous {
        report.push_str(&report::coefficient_table(
            "Homogeneous price effect",
            &h.rows()?,
            cfg.estimation.level,
        ));
        report.push('\n');
    }
    if let Some(h) = &estimates.heterogeneous {
        report.push_str(&report::coefficient_table(
            "Inference on the price effect modifiers",
            &h.estimate.rows()?,
            cfg.estimation.level,
        ));
        report.push('\n');
        report.push_str("Joint significance of the price effect modifiers\n");
        report.push_str(&report::wald_table(
            h.wald_all.as_ref(),
            h.wald_similarities.as_ref(),
        ));
        report.push('\n');
    }
    report.push_str(&elasticity);
    io::write_text(&dir.join("report.txt"), &report)?;

    let mut warnings = Vec::new();
    if let Some(m) = &prepared.model {
        warnings.extend(m.warnings.iter().cloned());
    }
    if let Some(h) = &estimates.heterogeneous {
        if !h.estimate.dropped.is_empty() {
            warnings.push(format!("dropped modifiers: {}", h.estimate.dropped.join(", ")));
        }
    }
    let manifest = Manifest {
        config_hash: hash.clone(),
        version: env!("CARGO_PKG_VERSION"),
        seeds: cfg
            .seeds()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        input_files: prepared.input.files.clone(),
        stages: rec.stages.clone(),
        counts: Counts {
            products: prepared.panel.n_products(),
            periods: prepared.panel.n_periods(),
            train_products: prepared.train.n_products(),
            estimation_products: prepared.test.n_products(),
            state_rows: estimates.state_rows,
        },
        warnings,
        timings_file: TIMINGS_FILE,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&dir.join(TIMINGS_FILE), &rec.timings)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        hash,
        prepared,
        estimates,
        timings: rec.timings,
    })
}

/// Steps 5–7 on the whole input panel, without split or compression.
pub fn run_estimate(cfg: &RunConfig, dir: &Path) -> Result<Estimates, CliError> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    prepare_output_dir(dir)?;
    write_config(dir, cfg, &hash)?;
    let src = input_path(cfg);
    let input = load_input(cfg).stage("partial_out", src)?;
    let mut rec = Recorder::default();
    let est = estimate(cfg, &mut rec, &input.panel, Some(dir), &hash, src)?;
    let text = write_elasticity(dir, cfg, &est, &hash)?;
    io::write_text(&dir.join("elasticity.txt"), &format!("{}{text}", io::header(&hash)))?;
    Ok(est)
}

/// Steps 1–4 only: writes the compression model and product features.
pub fn run_compress(cfg: &RunConfig, dir: &Path) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    prepare_output_dir(dir)?;
    write_config(dir, cfg, &hash)?;
    let mut rec = Recorder::default();
    let prepared = prepare(cfg, &mut rec, Some(dir), &hash)?;
    if prepared.model.is_none() {
        return Err(CliError::Config("input has no embeddings to compress".into()));
    }
    Ok(prepared)
}

/// Writes `panel.csv` (without raw embeddings), `embeddings.csv` and
/// `truth.csv` for a simulate-mode config.
pub fn run_simulate(cfg: &RunConfig, dir: &Path) -> Result<LoadedInput, CliError> {
    if !matches!(cfg.input, InputConfig::Simulate { .. }) {
        return Err(CliError::Config("`simulate` needs input.source = \"simulate\"".into()));
    }
    cfg.validate()?;
    let hash = cfg.hash()?;
    prepare_output_dir(dir)?;
    write_config(dir, cfg, &hash)?;
    let input = load_input(cfg)?;
    let panel = &input.panel;
    let without = drop_block(panel, FeatureKind::Embedding)?;
    io::write_panel(&dir.join("panel.csv"), &without, &hash)?;
    if let Some(e) = panel.product_block(FeatureKind::Embedding) {
        io::write_embeddings(&dir.join("embeddings.csv"), panel.products(), &e, &hash)?;
    }
    if let Some(truth) = &input.truth {
        io::write_truth(&dir.join("truth.csv"), truth, &hash)?;
    }
    Ok(input)
}

fn drop_block(panel: &PanelDataset, kind: FeatureKind) -> Result<PanelDataset, CliError> {
    let mut observations = panel.observations().to_vec();
    let mut blocks = Vec::new();
    let mut ranges = Vec::new();
    let mut offset = 0;
    for b in panel.blocks() {
        let w = b.names.len();
        if b.kind != kind {
            blocks.push(b.clone());
            ranges.push(offset..offset + w);
        }
        offset += w;
    }
    for o in &mut observations {
        o.embedding_features = ranges
            .iter()
            .flat_map(|r| o.embedding_features[r.clone()].to_vec())
            .collect();
    }
    Ok(PanelDataset::new(
        observations,
        panel.tabular_names().to_vec(),
        blocks,
    )?)
}

fn learner_name(spec: &LearnerSpec) -> &'static str {
    match spec.kind {
        LearnerKind::Linear => "Linear Reg",
        LearnerKind::LinearInteractions => "Linear Interactions Reg",
        LearnerKind::BoostedTrees => "Boosted Trees Reg",
    }
}

fn feature_label(set: FeatureSet, width: usize) -> String {
    match set {
        FeatureSet::Tabular => "[tabular]".into(),
        FeatureSet::Pca => format!("[+{width} PCAs]"),
        FeatureSet::Similarity => format!("[+{width} Similarities]"),
        FeatureSet::Embedding => format!("[+{width} Embeddings]"),
    }
}

/// Design for predicting period-`t` signals: lagged tabular controls plus
/// the product-level block of `set`. Targets are `Q, P, ΔQ, ΔP`.
pub fn eval_design(
    panel: &PanelDataset,
    set: FeatureSet,
) -> Result<(Matrix, Vec<String>, [Vec<f64>; 4]), CliError> {
    let block = match set.kind() {
        Some(kind) => Some(panel.block(kind).ok_or_else(|| {
            CliError::Config(format!("feature set {set:?} is not available in the panel"))
        })?),
        None => None,
    };
    let mut names: Vec<String> = panel.tabular_names().iter().map(|n| format!("{n}_lag")).collect();
    if let Some((_, b)) = block {
        names.extend(b.names.iter().cloned());
    }
    let mut data = Vec::new();
    let mut targets: [Vec<f64>; 4] = Default::default();
    for i in 0..panel.n_products() {
        for w in panel.product_series(i).windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            data.extend_from_slice(&prev.tabular_controls);
            if let Some((offset, b)) = block {
                data.extend_from_slice(&cur.embedding_features[offset..offset + b.names.len()]);
            }
            targets[0].push(cur.q);
            targets[1].push(cur.p);
            targets[2].push(cur.q - prev.q);
            targets[3].push(cur.p - prev.p);
        }
    }
    let x = Matrix::from_vec(targets[0].len(), names.len(), data)?;
    Ok((x, names, targets))
}

/// Test R² for every configured learner × feature set, training on the
/// compression sample and scoring on the estimation sample.
pub fn predictive_eval(cfg: &RunConfig, prepared: &Prepared) -> Result<Vec<R2Row>, CliError> {
    let mut rows = Vec::new();
    for spec in &cfg.eval.learners {
        for &set in &cfg.eval.feature_sets {
            let (x_train, names, y_train) = eval_design(&prepared.train, set)?;
            let (x_test, _, y_test) = eval_design(&prepared.test, set)?;
            let width = names.len() - prepared.panel.tabular_names().len();
            let mut scores = [0.0; 4];
            for t in 0..4 {
                let model = fit(spec, &x_train, &names, &y_train[t])?;
                let pred = model.predict(&x_test)?;
                scores[t] = r2_score(&y_test[t], &pred)?;
            }
            rows.push(R2Row {
                label: format!("{} {}", learner_name(spec), feature_label(set, width)),
                scores,
            });
        }
    }
    Ok(rows)
}

/// Runs steps 1–4 and the R² harness, writing `r2.csv` and `r2.txt`.
pub fn run_predictive_eval(cfg: &RunConfig, dir: &Path) -> Result<Vec<R2Row>, CliError> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    prepare_output_dir(dir)?;
    write_config(dir, cfg, &hash)?;
    let mut rec = Recorder::default();
    let prepared = prepare(cfg, &mut rec, None, &hash)?;
    let rows = predictive_eval(cfg, &prepared)?;
    let mut csv = io::header(&hash);
    csv.push_str("method,q,p,dq,dp\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.scores[0], r.scores[1], r.scores[2], r.scores[3]
        ));
    }
    io::write_text(&dir.join("r2.csv"), &csv)?;
    io::write_text(
        &dir.join("r2.txt"),
        &format!("{}{}", io::header(&hash), report::r2_table(&rows)),
    )?;
    Ok(rows)
}
