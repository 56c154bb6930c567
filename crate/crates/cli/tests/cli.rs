use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use demand_dml::config::{CompressionConfig, EffectModel, EvalConfig, FeatureSet, InputConfig, NuisanceConfig};
use demand_dml::io::{read_panel, read_ticks, write_panel, write_ticks, EstimateJson};
use demand_dml::RunConfig;
use demand_dml_core::learners::LearnerSpec;
use demand_dml_core::panel::RawSeries;
use demand_dml_core::sem::{simulate, SemConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demand-dml"))
}

fn small_sem() -> SemConfig {
    SemConfig {
        n_products: 120,
        n_periods: 4,
        embedding_dim: 24,
        seed: 9,
        ..SemConfig::default()
    }
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::simulated(small_sem());
    cfg.compression = CompressionConfig {
        target_dim: 16,
        k: 5,
        seed: 2,
    };
    cfg.nuisance = NuisanceConfig {
        q: LearnerSpec::linear(),
        p: LearnerSpec::linear(),
    };
    cfg.eval = EvalConfig {
        learners: vec![LearnerSpec::linear()],
        feature_sets: vec![FeatureSet::Tabular, FeatureSet::Similarity],
    };
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("bundle");
    let o = run(&["run", "-c", s(&cfg), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.toml",
        "split.csv",
        "compression_model.txt",
        "features.csv",
        "residuals.csv",
        "homogeneous.json",
        "heterogeneous.csv",
        "sorted_effects.csv",
        "wald.txt",
        "report.txt",
        "manifest.json",
        "timings.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("coef") && stdout.contains("[5.0%"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 7);
    assert_eq!(manifest["config_hash"], small_config().hash().unwrap());
    let sorted = fs::read_to_string(out.join("sorted_effects.csv")).unwrap();
    assert!(sorted.lines().any(|l| l == "index,alpha,lo,hi"));
}

#[test]
fn existing_output_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("bundle");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = run(&["run", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "x");
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let path = write_config(tmp.path(), &cfg);
    let root = tmp.path().join("runs");
    let o = bin()
        .args(["simulate", "-c", s(&path)])
        .env("DEMAND_DML_OUTPUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = root.join(&cfg.hash().unwrap()[..12]);
    assert!(dir.join("panel.csv").is_file());
    assert!(dir.join("embeddings.csv").is_file());
    assert!(dir.join("truth.csv").is_file());
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[input]\nsource = \"simulate\"\n[bogus]\nx = 1\n").unwrap();
    let o = run(&["run", "-c", s(&path), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));

    let mut cfg = small_config();
    cfg.estimation.cross_fit = false;
    cfg.nuisance = NuisanceConfig::default();
    let path = write_config(tmp.path(), &cfg);
    let o = run(&["run", "-c", s(&path), "-o", s(&tmp.path().join("o2"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.input = InputConfig::Load {
        panel: "nowhere.csv".into(),
        embeddings: None,
    };
    let path = write_config(tmp.path(), &cfg);
    let o = run(&["estimate", "-c", s(&path), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn simulate_then_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let path = write_config(tmp.path(), &cfg);
    let sim = tmp.path().join("sim");
    assert!(run(&["simulate", "-c", s(&path), "-o", s(&sim)]).status.success());

    let mut load = small_config();
    load.input = InputConfig::Load {
        panel: "sim/panel.csv".into(),
        embeddings: Some("sim/embeddings.csv".into()),
    };
    let load_path = tmp.path().join("load.toml");
    fs::write(&load_path, load.to_toml().unwrap()).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let oa = run(&["run", "-c", s(&path), "-o", s(&a)]);
    let ob = run(&["run", "-c", s(&load_path), "-o", s(&b)]);
    assert!(oa.status.success() && ob.status.success(), "{}", String::from_utf8_lossy(&ob.stderr));
    // same numbers whether the panel was simulated in memory or read back
    let ja = EstimateJson::read(&a.join("homogeneous.json")).unwrap();
    let jb = EstimateJson::read(&b.join("homogeneous.json")).unwrap();
    assert_eq!(ja.coefficients[0].coef, jb.coefficients[0].coef);
}

#[test]
fn report_converts_to_elasticity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.estimation.model = EffectModel::Homogeneous;
    let path = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("est");
    let o = run(&["estimate", "-c", s(&path), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = out.join("homogeneous.json");
    let csv = tmp.path().join("el.csv");
    let o = run(&["report", "--estimate", s(&est), "--theta", "0.5", "-o", s(&csv)]);
    assert!(o.status.success());
    let j = EstimateJson::read(&est).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let row: Vec<f64> = text
        .lines()
        .find(|l| l.starts_with("Price,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[3], j.coefficients[0].coef / 0.5);
    assert_eq!(row[4], j.coefficients[0].lo / 0.5);

    let o = run(&["report", "--estimate", s(&est), "--theta", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_writes_r2_table() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), &small_config());
    let out = tmp.path().join("eval");
    let o = run(&["eval", "-c", s(&path), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("r2.csv")).unwrap();
    assert!(text.contains("Linear Reg [tabular]"));
    assert!(text.contains("Linear Reg [+5 Similarities]"));
}

#[test]
fn panel_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (panel, _) = simulate(&small_sem()).unwrap();
    let path = tmp.path().join("panel.csv");
    write_panel(&path, &panel, "abc").unwrap();
    let back = read_panel(&path).unwrap();
    assert_eq!(back.observations(), panel.observations());
    assert_eq!(back.blocks(), panel.blocks());
    assert_eq!(back.tabular_names(), panel.tabular_names());
}

#[test]
fn ticks_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = vec![
        RawSeries {
            product_id: "b".into(),
            ranks: vec![10.0, 20.5, 30.0],
            prices: vec![9.99, 10.49, 8.0],
        },
        RawSeries {
            product_id: "a".into(),
            ranks: vec![1.0, 2.0, 3.0],
            prices: vec![1.0, 1.5, 2.0],
        },
    ];
    let path = tmp.path().join("ticks.csv");
    write_ticks(&path, &raw, "abc").unwrap();
    let mut back = read_ticks(&path).unwrap();
    back.sort_by(|x, y| y.product_id.cmp(&x.product_id));
    assert_eq!(back, raw);
}
