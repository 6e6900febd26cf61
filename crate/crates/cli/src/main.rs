use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plap_core::cheeger::{RatioMode, DEFAULT_LEVELS, DEFAULT_REFINE_TOL};
use plap_core::dynamics::{read_header, TransportCache};
use plap_core::experiment::{
    analyze, parse_flow_spec, run_experiment, ExperimentConfig, ExperimentKind, RunArtifacts,
};

#[derive(Parser)]
#[command(
    name = "plap",
    version,
    about = "Eigenpairs of the dynamic p-Laplacian and coherent sets from their level sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and/or flags.
    Run {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve a single exponent.
    Solve {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-run the level sweep on a saved eigenfunction.
    Analyze {
        /// Eigenfunction dump written by `run` or `solve`.
        eigenfunction: PathBuf,
        /// Flow spec, e.g. `identity`, `double_gyre`, `standard_map:a=0.9`.
        #[arg(long, default_value = "identity")]
        flow: String,
        /// static, dynamic_dirichlet or dynamic_neumann.
        #[arg(long, default_value = "static")]
        mode: String,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
        #[arg(long, default_value_t = DEFAULT_REFINE_TOL)]
        refine_tol: f64,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or clear the transport cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// List cache files and their headers.
    Inspect {
        #[arg(long, default_value = ".plap-cache")]
        cache: PathBuf,
    },
    /// Delete all cache files.
    Clear {
        #[arg(long, default_value = ".plap-cache")]
        cache: PathBuf,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// static_square, double_gyre, cylinder, standard_map or custom.
    #[arg(long)]
    experiment: Option<String>,
    /// Exponents, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// Grid as NXxNY.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Extra `key=value` settings, as in the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(anyhow::Error::msg);
        if !self.p.is_empty() {
            let p: Vec<String> = self.p.iter().map(f64::to_string).collect();
            set("p_values", p.join(","))?;
        }
        if let Some(g) = &self.grid {
            set("grid", g.clone())?;
        }
        if let Some(v) = self.grad_tol {
            set("grad_tol", v.to_string())?;
        }
        if let Some(v) = self.alpha {
            set("alpha", v.to_string())?;
        }
        if let Some(v) = self.levels {
            set("levels", v.to_string())?;
        }
        if let Some(v) = &self.out {
            set("out", v.display().to_string())?;
        }
        if let Some(v) = &self.cache {
            set("cache", v.display().to_string())?;
        }
        if let Some(v) = self.workers {
            set("workers", v.to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            set(k.trim(), v.trim().to_string())?;
        }
        Ok(())
    }
}

fn build_config(config: Option<&PathBuf>, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::new(ExperimentKind::StaticSquare),
    };
    if let Some(e) = &o.experiment {
        let kind = ExperimentKind::parse(e).with_context(|| format!("unknown experiment {e:?}"))?;
        if kind != cfg.experiment {
            let keep_out = config.is_some().then(|| cfg.output_dir.clone());
            cfg = ExperimentConfig::new(kind);
            if let Some(out) = keep_out {
                cfg.output_dir = out;
            }
        }
    }
    o.apply(&mut cfg)?;
    Ok(cfg)
}

fn report_run(run: &RunArtifacts) -> ExitCode {
    println!("p,lambda,iterations,best_ratio,best_level,median_ratio,status");
    for r in &run.results {
        let status = if r.converged() {
            "converged".to_string()
        } else {
            r.error.clone().unwrap_or_else(|| {
                r.pair
                    .as_ref()
                    .map_or("failed".into(), |p| p.termination.as_str().to_string())
            })
        };
        let lambda = r.pair.as_ref().map_or(f64::NAN, |p| p.lambda);
        let iters = r.pair.as_ref().map_or(0, |p| p.iterations);
        let (best, level, median) = r
            .report
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |x| (x.min_ratio, x.argmin_level, x.median_ratio));
        println!(
            "{},{lambda:.10},{iters},{best:.6},{level:.6},{median:.6},{status}",
            r.p
        );
    }
    println!("artifacts in {}", run.dir.display());
    if run.all_converged() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = build_config(config.as_ref(), &overrides)?;
            let run = run_experiment(&cfg)?;
            Ok(report_run(&run))
        }
        Command::Solve { overrides } => {
            if overrides.p.len() != 1 {
                bail!("solve takes exactly one --p");
            }
            let cfg = build_config(None, &overrides)?;
            let run = run_experiment(&cfg)?;
            Ok(report_run(&run))
        }
        Command::Analyze {
            eigenfunction,
            flow,
            mode,
            levels,
            refine_tol,
            out,
        } => {
            let flow = parse_flow_spec(&flow).map_err(anyhow::Error::msg)?;
            let mode = RatioMode::parse(&mode).with_context(|| format!("unknown mode {mode:?}"))?;
            let report = analyze(&eigenfunction, &flow, mode, levels, refine_tol)
                .with_context(|| format!("analyzing {}", eigenfunction.display()))?;
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(&path)?);
                    report.write_csv(&mut w)?;
                    w.flush()?;
                }
                None => report.write_csv(io::stdout().lock())?,
            }
            eprintln!(
                "min ratio {:.6} at level {:.6}, median {:.6}, {} levels, {} skipped",
                report.min_ratio,
                report.argmin_level,
                report.median_ratio,
                report.levels.len(),
                report.skipped.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Cache { action } => {
            match action {
                CacheAction::Inspect { cache } => {
                    let c = TransportCache::new(&cache);
                    let entries = c.entries()?;
                    println!("{} entries in {}", entries.len(), cache.display());
                    for e in entries {
                        println!("{}", e.display());
                        for h in read_header(&e)? {
                            println!("  {h}");
                        }
                    }
                }
                CacheAction::Clear { cache } => {
                    let n = TransportCache::new(&cache).clear()?;
                    println!("removed {n} entries from {}", cache.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
