use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptive_rom::parallel::Exec;
use adaptive_rom::pipeline::{self, Method, RunConfig};
use adaptive_rom::sampling::WeightingKernel;
use adaptive_rom::{Error, Result};

#[derive(Parser)]
#[command(name = "armrom", version, about = "Adaptive reduced-order models: offline training, online solves, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Reduced dimension; overrides the configuration.
    #[arg(long)]
    k: Option<usize>,
    /// DEIM points; overrides the configuration.
    #[arg(long)]
    m: Option<usize>,
    /// Kernel width; overrides the configuration.
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed for the test parameters.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full model on the training grid and store the snapshots.
    Offline(Common),
    /// Solve one reduced problem.
    Online {
        #[command(flatten)]
        common: Common,
        /// Target parameter, e.g. `4.5,8.5`.
        #[arg(long)]
        mu: String,
        /// grm|lrm|arm-chord, grm|lrm|arm-newton, arm|grm-galerkin or projection.
        #[arg(long)]
        method: String,
    },
    /// Compare reduced methods on random test parameters.
    Bench(Common),
    /// Format bench CSVs as Markdown tables.
    Report {
        /// Bench CSV files.
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(k) = c.k {
        cfg.k = k;
    }
    if let Some(m) = c.m {
        cfg.elliptic.m = Some(m);
    }
    if let Some(s) = c.sigma {
        cfg.kernel = match cfg.kernel {
            WeightingKernel::Compact { .. } => WeightingKernel::Compact { epsilon: s },
            _ => WeightingKernel::Gaussian { sigma: s },
        };
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let exec = Exec::default();
    match cli.command {
        Command::Offline(c) => {
            let cfg = load(&c)?;
            let store = pipeline::offline(&cfg, exec)?;
            println!(
                "stored {} snapshots ({} failed) in {}",
                store.params.len(),
                store.failed.len(),
                cfg.store_dir().display()
            );
        }
        Command::Online { common, mu, method } => {
            let cfg = load(&common)?;
            let mu = pipeline::parse_mu(&mu)?;
            let method: Method = method.parse()?;
            let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.join("online"));
            let r = pipeline::online(&cfg, &mu, method, &out)?;
            println!(
                "{} at {:?}: rel_error {:.3e}, {} iterations, online {:.3e} s, full {:.3e} s",
                r.method, r.mu, r.rel_error, r.iterations, r.online_time_s, r.full_time_s
            );
            if !r.converged {
                return Err(Error::NotConverged {
                    iterations: r.iterations,
                });
            }
        }
        Command::Bench(c) => {
            let cfg = load(&c)?;
            let b = pipeline::bench(&cfg, exec)?;
            for a in &b.aggregates {
                println!(
                    "{:<14} k={:<3} sigma={:<8} mean error {:.3e}  failures {}",
                    a.method,
                    a.k,
                    a.sigma.map_or("-".into(), |s| s.to_string()),
                    a.mean_rel_error,
                    a.failures
                );
            }
        }
        Command::Report { csv, out } => {
            for p in pipeline::report(&csv, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) | Error::Report(_) | Error::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
