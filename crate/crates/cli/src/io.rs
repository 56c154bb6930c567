//! File formats: panel, embeddings, tick and truth CSVs, the compression
//! model text file, and estimate tables.
//!
//! Every file written here starts with `# config_hash: <hex>` comment lines;
//! readers skip lines starting with `#`. Floats are written in Rust's
//! shortest round-trip representation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use demand_dml_core::compression::{CompressionModel, GaussianProjection, PcaModel};
use demand_dml_core::dml::{EffectEstimate, ResidualPanel, SortedEffect};
use demand_dml_core::panel::{
    FeatureBlock, FeatureKind, PanelDataset, PanelObservation, ProductId, RawSeries,
};
use demand_dml_core::sem::GroundTruth;
use demand_dml_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const HASH_PREFIX: &str = "# config_hash: ";

pub fn header(hash: &str) -> String {
    format!("{HASH_PREFIX}{hash}\n")
}

/// Reads the config hash from a file's leading comment block, if present.
pub fn read_hash(text: &str) -> Option<&str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(HASH_PREFIX))
        .map(str::trim)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

struct Table {
    out: String,
}

impl Table {
    fn new(hash: &str, columns: &[&str]) -> Self {
        let mut out = header(hash);
        out.push_str(&columns.join(","));
        out.push('\n');
        Table { out }
    }

    fn with_names(hash: &str, columns: &[String]) -> Self {
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        Table::new(hash, &cols)
    }

    fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.out.push(',');
            }
            first = false;
            self.out.push_str(f.as_ref());
        }
        self.out.push('\n');
    }

    fn write(self, path: &Path) -> Result<(), CliError> {
        write_text(path, &self.out)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(path, e.to_string()))
}

fn parse_f64(path: &Path, line: u64, column: &str, s: &str) -> Result<f64, CliError> {
    s.parse::<f64>().map_err(|_| {
        CliError::input(path, format!("line {line}: column `{column}`: not a number: {s:?}"))
    })
}

fn parse_usize(path: &Path, line: u64, column: &str, s: &str) -> Result<usize, CliError> {
    s.parse::<usize>().map_err(|_| {
        CliError::input(
            path,
            format!("line {line}: column `{column}`: not a non-negative integer: {s:?}"),
        )
    })
}

fn expect_columns(path: &Path, headers: &csv::StringRecord, want: &[&str]) -> Result<(), CliError> {
    for (i, w) in want.iter().enumerate() {
        if headers.get(i) != Some(*w) {
            return Err(CliError::input(
                path,
                format!(
                    "header must start with `{}`, found `{}`",
                    want.join(","),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
    }
    Ok(())
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// `product_id,period,q,p,<tabular...>,<emb*|cs*|pc*...>`.
pub fn write_panel(path: &Path, panel: &PanelDataset, hash: &str) -> Result<(), CliError> {
    let mut cols: Vec<String> = ["product_id", "period", "q", "p"].map(String::from).to_vec();
    cols.extend(panel.feature_names());
    let mut t = Table::with_names(hash, &cols);
    for o in panel.observations() {
        let mut f = vec![o.product_id.to_string(), o.period.to_string(), fmt(o.q), fmt(o.p)];
        f.extend(o.tabular_controls.iter().map(|&v| fmt(v)));
        f.extend(o.embedding_features.iter().map(|&v| fmt(v)));
        t.row(f);
    }
    t.write(path)
}

/// Columns named `emb<k>`, `cs<k>` or `pc<k>` become feature blocks; all
/// other control columns are tabular.
pub fn read_panel(path: &Path) -> Result<PanelDataset, CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::input(path, e.to_string()))?
        .clone();
    expect_columns(path, &headers, &["product_id", "period", "q", "p"])?;
    let controls: Vec<String> = headers.iter().skip(4).map(String::from).collect();
    let mut tabular_idx = Vec::new();
    let mut tabular_names = Vec::new();
    let mut by_kind: BTreeMap<FeatureKind, Vec<usize>> = BTreeMap::new();
    let mut kind_order = Vec::new();
    for (j, name) in controls.iter().enumerate() {
        match FeatureKind::from_column_name(name) {
            Some(kind) => {
                if !by_kind.contains_key(&kind) {
                    kind_order.push(kind);
                }
                by_kind.entry(kind).or_default().push(j);
            }
            None => {
                tabular_idx.push(j);
                tabular_names.push(name.clone());
            }
        }
    }
    let mut blocks = Vec::new();
    let mut block_idx = Vec::new();
    for kind in &kind_order {
        let idx = &by_kind[kind];
        blocks.push(FeatureBlock {
            kind: *kind,
            names: idx.iter().map(|&j| controls[j].clone()).collect(),
        });
        block_idx.extend_from_slice(idx);
    }
    let mut observations = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(path, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != headers.len() {
            return Err(CliError::input(
                path,
                format!("line {line}: {} fields, header has {}", rec.len(), headers.len()),
            ));
        }
        let values: Vec<f64> = (4..rec.len())
            .map(|j| parse_f64(path, line, &headers[j], &rec[j]))
            .collect::<Result<_, _>>()?;
        observations.push(PanelObservation {
            product_id: ProductId::from(&rec[0]),
            period: parse_usize(path, line, "period", &rec[1])?,
            q: parse_f64(path, line, "q", &rec[2])?,
            p: parse_f64(path, line, "p", &rec[3])?,
            tabular_controls: tabular_idx.iter().map(|&j| values[j]).collect(),
            embedding_features: block_idx.iter().map(|&j| values[j]).collect(),
        });
    }
    PanelDataset::new(observations, tabular_names, blocks).map_err(|e| CliError::Core(e).at(path))
}

/// `product_id,e0,...` with one row per product.
pub fn write_embeddings(
    path: &Path,
    products: &[ProductId],
    e: &Matrix,
    hash: &str,
) -> Result<(), CliError> {
    let mut cols = vec!["product_id".to_string()];
    cols.extend((0..e.ncols()).map(|j| format!("e{j}")));
    let mut t = Table::with_names(hash, &cols);
    for (id, row) in products.iter().zip(e.rows()) {
        let mut f = vec![id.to_string()];
        f.extend(row.iter().map(|&v| fmt(v)));
        t.row(f);
    }
    t.write(path)
}

/// Embeddings keyed by product id; column names after `product_id` are free.
pub fn read_embeddings(path: &Path) -> Result<BTreeMap<ProductId, Vec<f64>>, CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::input(path, e.to_string()))?
        .clone();
    expect_columns(path, &headers, &["product_id"])?;
    if headers.len() < 2 {
        return Err(CliError::input(path, "no embedding columns"));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(path, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != headers.len() {
            return Err(CliError::input(
                path,
                format!("line {line}: {} fields, header has {}", rec.len(), headers.len()),
            ));
        }
        let v: Vec<f64> = (1..rec.len())
            .map(|j| parse_f64(path, line, &headers[j], &rec[j]))
            .collect::<Result<_, _>>()?;
        if out.insert(ProductId::from(&rec[0]), v).is_some() {
            return Err(CliError::input(
                path,
                format!("line {line}: duplicate product {}", &rec[0]),
            ));
        }
    }
    Ok(out)
}

/// Arranges embeddings in `products` order.
pub fn embeddings_for(
    path: &Path,
    map: &BTreeMap<ProductId, Vec<f64>>,
    products: &[ProductId],
) -> Result<Matrix, CliError> {
    let rows: Vec<&Vec<f64>> = products
        .iter()
        .map(|id| {
            map.get(id)
                .ok_or_else(|| CliError::input(path, format!("no embedding for product {id}")))
        })
        .collect::<Result<_, _>>()?;
    Matrix::from_rows(&rows).map_err(|e| CliError::Core(e).at(path))
}

/// `product_id,tick,rank,price`; ticks of a product are sorted by index and
/// must be unique.
pub fn read_ticks(path: &Path) -> Result<Vec<RawSeries>, CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::input(path, e.to_string()))?
        .clone();
    expect_columns(path, &headers, &["product_id", "tick", "rank", "price"])?;
    let mut by_product: BTreeMap<ProductId, Vec<(usize, f64, f64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::input(path, e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() < 4 {
            return Err(CliError::input(path, format!("line {line}: expected 4 fields")));
        }
        by_product.entry(ProductId::from(&rec[0])).or_default().push((
            parse_usize(path, line, "tick", &rec[1])?,
            parse_f64(path, line, "rank", &rec[2])?,
            parse_f64(path, line, "price", &rec[3])?,
        ));
    }
    let mut out = Vec::with_capacity(by_product.len());
    for (id, mut ticks) in by_product {
        ticks.sort_by_key(|t| t.0);
        if let Some(w) = ticks.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(CliError::input(
                path,
                format!("product {id}: duplicate tick {}", w[0].0),
            ));
        }
        out.push(RawSeries {
            product_id: id,
            ranks: ticks.iter().map(|t| t.1).collect(),
            prices: ticks.iter().map(|t| t.2).collect(),
        });
    }
    Ok(out)
}

pub fn write_ticks(path: &Path, raw: &[RawSeries], hash: &str) -> Result<(), CliError> {
    let mut t = Table::new(hash, &["product_id", "tick", "rank", "price"]);
    for s in raw {
        for (i, (r, p)) in s.ranks.iter().zip(&s.prices).enumerate() {
            t.row([s.product_id.to_string(), i.to_string(), fmt(*r), fmt(*p)]);
        }
    }
    t.write(path)
}

/// `product_id,period,a_it,cace,outcome_shock,cluster_label`.
pub fn write_truth(path: &Path, truth: &GroundTruth, hash: &str) -> Result<(), CliError> {
    let mut t = Table::new(
        hash,
        &["product_id", "period", "a_it", "cace", "outcome_shock", "cluster_label"],
    );
    let mut products: Vec<&ProductId> = truth.product_ids.iter().collect();
    products.dedup();
    let label: BTreeMap<&ProductId, usize> = products
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, truth.cluster_label[i]))
        .collect();
    for i in 0..truth.a_it.len() {
        let id = &truth.product_ids[i];
        t.row([
            id.to_string(),
            truth.periods[i].to_string(),
            fmt(truth.a_it[i]),
            fmt(truth.cace[i]),
            fmt(truth.outcome_shock[i]),
            label[id].to_string(),
        ]);
    }
    t.write(path)
}

/// `product_id,period,fold,q_hat,p_hat,q_perp,p_perp`.
pub fn write_residuals(path: &Path, res: &ResidualPanel, hash: &str) -> Result<(), CliError> {
    let mut t = Table::new(
        hash,
        &["product_id", "period", "fold", "q_hat", "p_hat", "q_perp", "p_perp"],
    );
    for i in 0..res.len() {
        t.row([
            res.product_ids[i].to_string(),
            res.periods[i].to_string(),
            res.folds[i].to_string(),
            fmt(res.q_hat[i]),
            fmt(res.p_hat[i]),
            fmt(res.q_perp[i]),
            fmt(res.p_perp[i]),
        ]);
    }
    t.write(path)
}

/// `index,alpha,lo,hi`.
pub fn write_sorted_effects(path: &Path, curve: &[SortedEffect], hash: &str) -> Result<(), CliError> {
    let mut t = Table::new(hash, &["index", "alpha", "lo", "hi"]);
    for s in curve {
        t.row([fmt(s.index), fmt(s.alpha), fmt(s.lo), fmt(s.hi)]);
    }
    t.write(path)
}

/// `label,coef,std_err,t,p_value,lo,hi`.
pub fn write_coefficients(path: &Path, est: &EffectEstimate, hash: &str) -> Result<(), CliError> {
    let mut t = Table::new(hash, &["label", "coef", "std_err", "t", "p_value", "lo", "hi"]);
    for r in est.rows()? {
        t.row([
            r.label.clone(),
            fmt(r.coef),
            fmt(r.std_err),
            fmt(r.t),
            fmt(r.p_value),
            fmt(r.lo),
            fmt(r.hi),
        ]);
    }
    t.write(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientJson {
    pub label: String,
    pub coef: f64,
    pub std_err: f64,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateJson {
    pub config_hash: String,
    pub model: String,
    pub level: f64,
    pub critical: String,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub coefficients: Vec<CoefficientJson>,
    pub covariance: Vec<Vec<f64>>,
    pub dropped: Vec<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl EstimateJson {
    pub fn new(model: &str, est: &EffectEstimate, hash: &str) -> Result<Self, CliError> {
        let coefficients = est
            .rows()?
            .into_iter()
            .map(|r| CoefficientJson {
                label: r.label,
                coef: r.coef,
                std_err: r.std_err,
                t: finite(r.t),
                p_value: finite(r.p_value),
                lo: r.lo,
                hi: r.hi,
            })
            .collect();
        Ok(EstimateJson {
            config_hash: hash.to_string(),
            model: model.to_string(),
            level: est.inference.level,
            critical: format!("{:?}", est.inference.critical),
            n_obs: est.n_obs,
            n_clusters: est.n_clusters,
            coefficients,
            covariance: est.covariance.rows().map(<[f64]>::to_vec).collect(),
            dropped: est.dropped.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::input(path, e.to_string()))?;
        text.push('\n');
        write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(path, e.to_string()))
    }
}

fn push_matrix(out: &mut String, m: &Matrix) {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn push_block(out: &mut String, name: &str) {
    out.push_str("## block: ");
    out.push_str(name);
    out.push('\n');
}

/// Plain-text compression model: `## block: <name>` sections holding
/// whitespace-separated rows.
pub fn write_compression_model(
    path: &Path,
    model: &CompressionModel,
    hash: &str,
) -> Result<(), CliError> {
    write_text(path, &compression_model_text(model, hash))
}

pub fn compression_model_text(model: &CompressionModel, hash: &str) -> String {
    let mut out = header(hash);
    push_block(&mut out, "meta");
    out.push_str(&format!(
        "input_dim {}\noutput_dim {}\nk {}\nseed {}\ntie_warning {}\n",
        model.projection.input_dim(),
        model.projection.output_dim(),
        model.k,
        model.seed,
        model.pca.tie_warning
    ));
    push_block(&mut out, "projection");
    push_matrix(&mut out, model.projection.matrix());
    push_block(&mut out, "mean");
    push_matrix(&mut out, &Matrix::from_vec(1, model.mean.len(), model.mean.clone()).expect("row"));
    push_block(&mut out, "pca_axes");
    push_matrix(&mut out, &model.pca.axes);
    push_block(&mut out, "eigenvalues");
    let ev = &model.pca.eigenvalues;
    push_matrix(&mut out, &Matrix::from_vec(1, ev.len(), ev.clone()).expect("row"));
    push_block(&mut out, "centroids");
    push_matrix(&mut out, &model.centroids);
    push_block(&mut out, "warnings");
    for w in &model.warnings {
        out.push_str(&w.replace('\n', " "));
        out.push('\n');
    }
    out
}

pub fn read_compression_model(path: &Path) -> Result<CompressionModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_compression_model(&text).map_err(|m| CliError::input(path, m))
}

pub fn parse_compression_model(text: &str) -> Result<CompressionModel, String> {
    let mut blocks: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current: Option<&str> = None;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("## block: ") {
            current = Some(name.trim());
            blocks.insert(name.trim(), Vec::new());
        } else if line.starts_with('#') {
            continue;
        } else if let Some(c) = current {
            if !line.trim().is_empty() || c == "warnings" {
                blocks.get_mut(c).expect("block").push(line);
            }
        }
    }
    let get = |name: &str| {
        blocks
            .get(name)
            .ok_or_else(|| format!("missing block `{name}`"))
    };
    let matrix = |name: &str| -> Result<Matrix, String> {
        let rows: Vec<Vec<f64>> = get(name)?
            .iter()
            .map(|l| {
                l.split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| format!("block `{name}`: bad number {s:?}")))
                    .collect()
            })
            .collect::<Result<_, _>>()?;
        Matrix::from_rows(&rows).map_err(|e| format!("block `{name}`: {e}"))
    };
    let mut meta = BTreeMap::new();
    for l in get("meta")? {
        let mut it = l.split_whitespace();
        if let (Some(k), Some(v)) = (it.next(), it.next()) {
            meta.insert(k, v);
        }
    }
    let meta_num = |k: &str| -> Result<u64, String> {
        meta.get(k)
            .ok_or_else(|| format!("meta lacks `{k}`"))?
            .parse::<u64>()
            .map_err(|_| format!("meta `{k}` is not an integer"))
    };
    let projection = matrix("projection")?;
    let mean = matrix("mean")?.into_vec();
    let axes = matrix("pca_axes")?;
    let eigenvalues = matrix("eigenvalues")?.into_vec();
    let centroids = matrix("centroids")?;
    let k = meta_num("k")? as usize;
    if projection.nrows() as u64 != meta_num("input_dim")?
        || projection.ncols() as u64 != meta_num("output_dim")?
        || mean.len() != projection.ncols()
        || centroids.nrows() != k
        || centroids.ncols() != projection.ncols()
    {
        return Err("block shapes disagree with meta".into());
    }
    let warnings = get("warnings")?
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    Ok(CompressionModel {
        projection: GaussianProjection::from_matrix(projection),
        mean,
        pca: PcaModel {
            axes,
            eigenvalues,
            tie_warning: meta.get("tie_warning") == Some(&"true"),
        },
        centroids,
        k,
        seed: meta_num("seed")?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_header_is_found() {
        let text = "# config_hash: abc123\nproduct_id,period\n";
        assert_eq!(read_hash(text), Some("abc123"));
        assert_eq!(read_hash("product_id\n# config_hash: x\n"), None);
    }

    #[test]
    fn compression_model_text_round_trips() {
        let mut e = Matrix::zeros(40, 6);
        for i in 0..40 {
            for j in 0..6 {
                e.row_mut(i)[j] = ((i * 7 + j * 3) % 11) as f64 - 5.0 + (j == i % 3) as u8 as f64;
            }
        }
        let (model, _) = CompressionModel::fit(&e, 4, 3, 9).unwrap();
        let text = compression_model_text(&model, "h");
        let back = parse_compression_model(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(compression_model_text(&back, "h"), text);
    }
}
