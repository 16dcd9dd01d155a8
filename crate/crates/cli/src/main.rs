use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use conet::engine::Strategy;
use conet::SimConfig;
use conet_cli::{
    aggregate_csv, load_config, run_ratio_study, run_single, run_sweep, single_csv, sweep_csv, trace_rows, write_csv,
    Family, SweepSpec,
};

#[derive(Parser)]
#[command(name = "conet", version, about = "Edge-server cooperation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep one variable over a grid for several strategies.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        family: Family,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "conet,one-hop,no-cooperation,local")]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 30)]
        replications: usize,
        /// Base seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-run CSV; the aggregate goes to the same path with an `.agg.csv` suffix. Stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run with its per-task trace.
    Single {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "conet")]
        strategy: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV; the trace goes next to it with a `.trace.csv` suffix. Stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximation ratio on random small snapshots.
    Ratio {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        max_servers: usize,
        #[arg(long, default_value_t = 1000)]
        units: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(path: &Option<PathBuf>) -> Result<SimConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(SimConfig::default()),
    }
}

fn strategies(names: &[String]) -> Result<Vec<Strategy>> {
    names.iter().map(|s| s.parse::<Strategy>().map_err(Into::into)).collect()
}

fn with_suffix(path: &std::path::Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Sweep { config: path, family, grid, strategies: names, replications, seed, out } => {
            let fixed = config(&path)?;
            let spec = SweepSpec {
                family,
                grid,
                base_seed: seed.unwrap_or(fixed.seed),
                fixed,
                strategies: strategies(&names)?,
                replications,
            };
            let res = run_sweep(&spec)?;
            emit(&out, &sweep_csv(&res.rows)?)?;
            let agg = aggregate_csv(&res.aggregate)?;
            match &out {
                Some(p) => emit(&Some(with_suffix(p, ".agg.csv")), &agg)?,
                None => eprint!("{agg}"),
            }
        }
        Cmd::Single { config: path, strategy, seed, out } => {
            let cfg = config(&path)?;
            let s: Strategy = strategy.parse()?;
            let res = run_single(&cfg, s, seed.unwrap_or(cfg.seed))?;
            emit(&out, &single_csv(&res)?)?;
            let mut buf = Vec::new();
            write_csv(&trace_rows(&res), &mut buf)?;
            let trace = String::from_utf8(buf)?;
            match &out {
                Some(p) => emit(&Some(with_suffix(p, ".trace.csv")), &trace)?,
                None => eprint!("{trace}"),
            }
        }
        Cmd::Ratio { config: path, instances, seed, max_servers, units, out } => {
            let cfg = config(&path)?;
            let study = run_ratio_study(&cfg, instances, seed.unwrap_or(cfg.seed), max_servers, units)?;
            emit(&out, &study.csv())?;
            eprintln!("{}", study.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
