use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demand_dml::io::EstimateJson;
use demand_dml::pipeline::{self, resolve_output};
use demand_dml::report;
use demand_dml::{CliError, RunConfig};
use demand_dml_core::dml::CoefficientRow;

#[derive(Parser)]
#[command(name = "demand-dml", version, about = "Cross-fitted DML price-effect estimation on product panels")]
struct Cli {
    /// Worker threads for fold fits and k-means restarts (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; must not exist or be empty.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root for output directories when `--out` is not given.
    #[arg(long, env = "DEMAND_DML_OUTPUT")]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel with ground truth (panel.csv, embeddings.csv, truth.csv).
    Simulate(Common),
    /// Split, then fit and apply the embedding compression.
    Compress(Common),
    /// Partial out and estimate on the whole input panel.
    Estimate(Common),
    /// Test R² of the configured learners and feature sets.
    Eval(Common),
    /// Convert an estimate JSON into demand elasticities.
    Report {
        /// `homogeneous.json` or `heterogeneous.json` from a run.
        #[arg(short, long)]
        estimate: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        /// Also write the converted table as CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the whole workflow and write the report bundle.
    Run(Common),
}

fn output_dir(c: &Common, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let hash = cfg.hash()?;
    Ok(resolve_output(c.out.clone(), c.output_root.clone(), &hash))
}

fn with_config(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let cfg = RunConfig::load(&c.config)?;
    let dir = output_dir(c, &cfg)?;
    Ok((cfg, dir))
}

fn report_command(estimate: &PathBuf, theta: f64, out: Option<&PathBuf>) -> Result<(), CliError> {
    let est = EstimateJson::read(estimate)?;
    let rows: Vec<CoefficientRow> = est
        .coefficients
        .iter()
        .map(|c| CoefficientRow {
            label: c.label.clone(),
            coef: c.coef,
            std_err: c.std_err,
            t: c.t.unwrap_or(f64::NAN),
            p_value: c.p_value.unwrap_or(f64::NAN),
            lo: c.lo,
            hi: c.hi,
        })
        .collect();
    let conv = report::report_elasticity(&rows, theta)?;
    print!("{}", report::elasticity_table(&conv, theta, est.level));
    if let Some(path) = out {
        let mut csv = demand_dml::io::header(&est.config_hash);
        csv.push_str("label,coef,lo,hi,elasticity,elasticity_lo,elasticity_hi\n");
        for r in &conv {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label, r.coef, r.lo, r.hi, r.elasticity, r.elasticity_lo, r.elasticity_hi
            ));
        }
        demand_dml::io::write_text(path, &csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(c) => {
            let (cfg, dir) = with_config(c)?;
            let input = pipeline::run_simulate(&cfg, &dir)?;
            println!(
                "simulated {} products × {} periods into {}",
                input.panel.n_products(),
                input.panel.n_periods(),
                dir.display()
            );
        }
        Command::Compress(c) => {
            let (cfg, dir) = with_config(c)?;
            let p = pipeline::run_compress(&cfg, &dir)?;
            println!(
                "compressed {} products into {}",
                p.panel.n_products(),
                dir.display()
            );
        }
        Command::Estimate(c) => {
            let (cfg, dir) = with_config(c)?;
            let est = pipeline::run_estimate(&cfg, &dir)?;
            if let Some(h) = &est.homogeneous {
                print!(
                    "{}",
                    report::coefficient_table("Homogeneous price effect", &h.rows()?, cfg.estimation.level)
                );
            }
            if let Some(h) = &est.heterogeneous {
                print!(
                    "{}",
                    report::coefficient_table(
                        "Inference on the price effect modifiers",
                        &h.estimate.rows()?,
                        cfg.estimation.level
                    )
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Eval(c) => {
            let (cfg, dir) = with_config(c)?;
            let rows = pipeline::run_predictive_eval(&cfg, &dir)?;
            print!("{}", report::r2_table(&rows));
            println!("wrote {}", dir.display());
        }
        Command::Report {
            estimate,
            theta,
            out,
        } => report_command(estimate, *theta, out.as_ref())?,
        Command::Run(c) => {
            let (cfg, dir) = with_config(c)?;
            pipeline::run_pipeline(&cfg, &dir)?;
            let text = std::fs::read_to_string(dir.join("report.txt"))
                .map_err(|e| CliError::io(&dir.join("report.txt"), e))?;
            print!("{text}");
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
