//! Fixed-width text tables and the rank-to-elasticity conversion.

use demand_dml_core::dml::{CoefficientRow, WaldTest};
use demand_dml_core::panel::rank_to_demand_elasticity;

use crate::error::CliError;

fn pct(p: f64) -> String {
    let s = format!("{:.1}", p * 100.0);
    format!("{s}%")
}

/// Column headers `[lo%, hi%]` for a two-sided interval at `level`.
pub fn interval_headers(level: f64) -> (String, String) {
    let tail = (1.0 - level) / 2.0;
    (format!("[{}", pct(tail)), format!("{}]", pct(1.0 - tail)))
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "nan".into()
    }
}

fn label_width(rows: &[CoefficientRow]) -> usize {
    rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(8)
}

/// `coef, std err, t, P-val., [lo%, hi%]` with three decimals.
pub fn coefficient_table(title: &str, rows: &[CoefficientRow], level: f64) -> String {
    let w = label_width(rows);
    let (lo, hi) = interval_headers(level);
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    let head = format!(
        "{:<w$} {:>9} {:>9} {:>9} {:>7} {:>9} {:>9}",
        "", "coef", "std err", "t", "P-val.", lo, hi
    );
    let rule = "=".repeat(head.chars().count());
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&head);
    out.push('\n');
    out.push_str(&"-".repeat(head.chars().count()));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:<w$} {:>9} {:>9} {:>9} {:>7} {:>9} {:>9}\n",
            r.label,
            num(r.coef),
            num(r.std_err),
            num(r.t),
            num(r.p_value),
            num(r.lo),
            num(r.hi)
        ));
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

/// Two-column joint-test table: all modifiers and similarities only.
pub fn wald_table(all: Option<&WaldTest>, similarities: Option<&WaldTest>) -> String {
    let cell = |t: Option<&WaldTest>, f: fn(&WaldTest) -> String| t.map_or("-".into(), f);
    let mut out = String::new();
    let head = format!("{:<10} {:>15} {:>18}", "", "All Modifiers", "Similarities Only");
    let rule = "=".repeat(head.len());
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&head);
    out.push('\n');
    out.push_str(&"-".repeat(head.len()));
    out.push('\n');
    let lines: [(&str, fn(&WaldTest) -> String); 3] = [
        ("chi2", |t| num(t.statistic)),
        ("df", |t| t.df.to_string()),
        ("p-value", |t| num(t.p_value)),
    ];
    for (name, f) in lines {
        out.push_str(&format!(
            "{:<10} {:>15} {:>18}\n",
            name,
            cell(all, f),
            cell(similarities, f)
        ));
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityRow {
    pub label: String,
    pub coef: f64,
    pub lo: f64,
    pub hi: f64,
    pub elasticity: f64,
    pub elasticity_lo: f64,
    pub elasticity_hi: f64,
}

/// Appends `coef / θ` and the identically converted interval.
pub fn report_elasticity(rows: &[CoefficientRow], theta: f64) -> Result<Vec<ElasticityRow>, CliError> {
    rows.iter()
        .map(|r| {
            Ok(ElasticityRow {
                label: r.label.clone(),
                coef: r.coef,
                lo: r.lo,
                hi: r.hi,
                elasticity: rank_to_demand_elasticity(r.coef, theta)?,
                elasticity_lo: rank_to_demand_elasticity(r.lo, theta)?,
                elasticity_hi: rank_to_demand_elasticity(r.hi, theta)?,
            })
        })
        .collect()
}

pub fn elasticity_table(rows: &[ElasticityRow], theta: f64, level: f64) -> String {
    let w = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(8);
    let (lo, hi) = interval_headers(level);
    let mut out = format!("Demand elasticity (theta = {theta})\n");
    let head = format!(
        "{:<w$} {:>9} {:>9} {:>9} {:>11} {:>9} {:>9}",
        "", "coef", lo, hi, "elasticity", lo, hi
    );
    let rule = "=".repeat(head.chars().count());
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&head);
    out.push('\n');
    out.push_str(&"-".repeat(head.chars().count()));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:<w$} {:>9} {:>9} {:>9} {:>11} {:>9} {:>9}\n",
            r.label,
            num(r.coef),
            num(r.lo),
            num(r.hi),
            num(r.elasticity),
            num(r.elasticity_lo),
            num(r.elasticity_hi)
        ));
    }
    out.push_str(&rule);
    out.push('\n');
    out
}

pub const R2_TARGETS: [&str; 4] = ["Q_it", "P_it", "ΔQ_it", "ΔP_it"];

#[derive(Debug, Clone, PartialEq)]
pub struct R2Row {
    pub label: String,
    /// Test R² for `Q, P, ΔQ, ΔP`.
    pub scores: [f64; 4],
}

pub fn r2_table(rows: &[R2Row]) -> String {
    let w = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(16);
    let mut out = String::from("Test R² scores\n");
    let mut head = format!("{:<w$}", "Method [features]");
    for t in R2_TARGETS {
        head.push_str(&format!(" {:>9}", t));
    }
    let width = head.chars().count();
    out.push_str(&"=".repeat(width));
    out.push('\n');
    out.push_str(&head);
    out.push('\n');
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<w$}", r.label));
        for s in r.scores {
            out.push_str(&format!(" {:>9}", format!("{:.2}%", s * 100.0)));
        }
        out.push('\n');
    }
    out.push_str(&"=".repeat(width));
    out.push('\n');
    out
}
