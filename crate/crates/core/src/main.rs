use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use proxbias::bias::{bias_report, detect_setup};
use proxbias::bridge::certify_bridge;
use proxbias::completeness::{self, certify};
use proxbias::estimators::{fit_or, fit_proximal_gmm, fit_unadj};
use proxbias::lsem::{sample, true_ace, LsemSpec};
use proxbias::moments::treatment_moments;
use proxbias::sweep::{self, bridge_form, Budget, Family, RunOptions, SweepConfig};
use proxbias::{presets, Error, Result};

#[derive(Parser)]
#[command(name = "proxbias", version = sweep::build_id(), about = "Bias of proximal, adjusted and unadjusted ACE estimators in linear SEMs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// JSON file: a sweep config for `sweep`, a spec for the other subcommands
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Shipped preset name instead of --config
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    quadrature_order: Option<usize>,
    /// Output file; stdout when absent
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate bias curves along one parameter axis and write CSV
    Sweep {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
        /// Print the shipped preset names and exit
        #[arg(long)]
        list: bool,
    },
    /// Closed-form biases and intermediates for one spec
    Bias,
    /// Simulate one dataset and fit the estimators
    Fit {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["por", "or", "unadj"])]
        estimators: Vec<EstimatorArg>,
    },
    /// Fredholm residual and population-solve check of the base-case outcome bridge
    CertifyBridge,
    /// Conditional mean of the completeness counterexample over the certification grid
    CertifyCompleteness,
    /// Run every verification battery
    Verify {
        #[arg(long, default_value = "all")]
        family: Family,
        #[arg(long, default_value = "default")]
        budget: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Por,
    Or,
    Unadj,
}

enum Outcome {
    Ok,
    Failed,
    PoleWarning,
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_spec(g: &Global, fallback: &str) -> Result<LsemSpec> {
    match (&g.config, &g.preset) {
        (Some(_), Some(_)) => Err(Error::Config("give --config or --preset, not both".into())),
        (Some(p), None) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        (None, Some(name)) => presets::spec(name),
        (None, None) => presets::spec(fallback),
    }
}

fn order(g: &Global, default: usize) -> usize {
    g.quadrature_order.unwrap_or(default)
}

#[derive(Serialize)]
struct FitRow {
    estimator: &'static str,
    psi_hat: f64,
    bias: f64,
    se_psi: f64,
    n: usize,
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    match cli.cmd {
        Cmd::Sweep { cache_dir, no_cache, list } => {
            if list {
                let names: Vec<&str> = presets::sweep_names().collect();
                emit(&None, &(names.join("\n") + "\n"))?;
                return Ok(Outcome::Ok);
            }
            let mut cfg = match (&g.config, &g.preset) {
                (Some(_), Some(_)) => return Err(Error::Config("give --config or --preset, not both".into())),
                (Some(p), None) => SweepConfig::from_path(p)?,
                (None, Some(name)) => presets::sweep(name)?,
                (None, None) => return Err(Error::Config("sweep needs --config or --preset".into())),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(o) = g.quadrature_order {
                cfg.quadrature_order = o;
            }
            let opts = RunOptions { threads: g.threads, no_cache, cache_dir };
            let result = sweep::run_sweep_with(&cfg, &opts, &Default::default())?;
            let out = g.out.clone().or(cfg.output.clone());
            emit(&out, &result.to_csv())?;
            let poles = result.pole_rows();
            if poles.is_empty() {
                Ok(Outcome::Ok)
            } else {
                eprintln!("warning: {} row(s) sit on a bias pole: {:?}", poles.len(), poles);
                Ok(Outcome::PoleWarning)
            }
        }
        Cmd::Bias => {
            let spec = load_spec(g, "section6")?;
            let mom = treatment_moments(&spec, order(g, sweep::DEFAULT_ORDER))?;
            match bias_report(&spec, &mom) {
                Ok(r) => {
                    emit(&g.out, &json(&r)?)?;
                    Ok(Outcome::Ok)
                }
                Err(e @ Error::Pole { .. }) => {
                    eprintln!("warning: {e}");
                    Ok(Outcome::PoleWarning)
                }
                Err(e) => Err(e),
            }
        }
        Cmd::Fit { n, estimators } => {
            let spec = load_spec(g, "section6")?;
            let data = sample(&spec, n, g.seed.unwrap_or(0))?;
            let ace = true_ace(&spec);
            let form = detect_setup(&spec).map(bridge_form).unwrap_or(proxbias::estimators::BridgeForm::Full);
            let mut rows = Vec::new();
            for e in estimators {
                let (name, fit) = match e {
                    EstimatorArg::Por => ("por", fit_proximal_gmm(&data, form)?),
                    EstimatorArg::Or => ("or", fit_or(&data)?),
                    EstimatorArg::Unadj => ("unadj", fit_unadj(&data)?),
                };
                rows.push(FitRow { estimator: name, psi_hat: fit.psi_hat, bias: fit.psi_hat - ace, se_psi: fit.se_psi, n });
            }
            emit(&g.out, &json(&rows)?)?;
            Ok(Outcome::Ok)
        }
        Cmd::CertifyBridge => {
            let spec = load_spec(g, "base-case")?;
            let c = certify_bridge(&spec, order(g, sweep::DEFAULT_ORDER))?;
            emit(&g.out, &json(&c)?)?;
            Ok(if c.passed { Outcome::Ok } else { Outcome::Failed })
        }
        Cmd::CertifyCompleteness => {
            let spec = load_spec(g, "completeness")?;
            let c = certify(&spec, order(g, completeness::DEFAULT_ORDER))?;
            let mut text = format!(
                "# max_abs_conditional_mean: {:?}\n# max_abs_g: {:?}\n# passed: {}\nz,a,x,value\n",
                c.max_abs_conditional_mean, c.max_abs_g, c.passed
            );
            for r in &c.rows {
                text += &format!("{:?},{},{:?},{:?}\n", r.z, r.a, r.x, r.value);
            }
            emit(&g.out, &text)?;
            Ok(if c.passed { Outcome::Ok } else { Outcome::Failed })
        }
        Cmd::Verify { family, budget } => {
            let mut b = Budget::named(&budget)?;
            if let Some(o) = g.quadrature_order {
                b.quadrature_order = o;
            }
            let run = || sweep::verify_all(family, b);
            let report = match g.threads {
                Some(k) => rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                    .install(run)?,
                None => run()?,
            };
            for bat in &report.batteries {
                eprintln!("{:<22} {}  {}", bat.name, if bat.passed { "pass" } else { "FAIL" }, bat.detail);
            }
            emit(&g.out, &json(&report)?)?;
            Ok(if report.passed { Outcome::Ok } else { Outcome::Failed })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Ok(Outcome::PoleWarning) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
