//! Sweep, single-run and ratio-study drivers behind the `conet` binary.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use conet::bcu::CooperationForest;
use conet::capacity::announce_round;
use conet::engine::{aggregate, run, RunResult, Strategy, Summary};
use conet::oracle::{bound_check, measure_ratio, RatioReport, SolveMode};
use conet::topology::generate;
use conet::{Interval, MetricsRecord, MobileUser, ServerState, SimConfig};

/// Environment variable holding the worker count; unset means one per core.
pub const WORKERS_ENV: &str = "CONET_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Servers,
    TaskSize,
    GenRate,
    Cpu,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Servers, Family::TaskSize, Family::GenRate, Family::Cpu];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Servers => "servers",
            Family::TaskSize => "task_size",
            Family::GenRate => "gen_rate",
            Family::Cpu => "cpu",
        }
    }

    /// `base` with this family's variable set to `v`.
    ///
    /// Task size is in bits, CPU in Hz. A CPU class `v` draws server frequencies from `[v/2, 3v/2]`.
    pub fn apply(&self, base: &SimConfig, v: f64) -> SimConfig {
        let mut cfg = base.clone();
        match self {
            Family::Servers => cfg.n_servers = v as usize,
            Family::TaskSize => cfg.task_size_range = Interval::point(v),
            Family::GenRate => cfg.gen_rate = v,
            Family::Cpu => cfg.cpu_range = Interval::new(v / 2.0, 1.5 * v),
        }
        cfg
    }
}

impl std::str::FromStr for Family {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "servers" => Ok(Family::Servers),
            "task_size" | "task" => Ok(Family::TaskSize),
            "gen_rate" | "gen" => Ok(Family::GenRate),
            "cpu" => Ok(Family::Cpu),
            other => bail!("unknown sweep family {other:?} (expected servers, task_size, gen_rate or cpu)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub family: Family,
    pub grid: Vec<f64>,
    /// Every other parameter.
    pub fixed: SimConfig,
    pub strategies: Vec<Strategy>,
    pub replications: usize,
    pub base_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            bail!("grid is empty");
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            bail!("grid must be strictly increasing: {:?}", self.grid);
        }
        if self.replications == 0 {
            bail!("replications must be at least 1");
        }
        if self.strategies.is_empty() {
            bail!("no strategies given");
        }
        for &v in &self.grid {
            let cfg = self.family.apply(&self.fixed, v);
            if let Some(bad) = conet::validate_config(&cfg).first() {
                bail!("{} = {v}: {}: {}", self.family.name(), bad.field, bad.message);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub family: &'static str,
    pub value: f64,
    pub strategy: &'static str,
    pub seed: u64,
    pub throughput: f64,
    pub mean_delay: f64,
    pub p95_delay: f64,
    pub avg_coop_distance: f64,
    pub tasks_completed: u64,
    pub rejected_bits: f64,
}

impl SweepRow {
    pub const HEADER: [&'static str; 10] = [
        "family",
        "value",
        "strategy",
        "seed",
        "throughput",
        "mean_delay",
        "p95_delay",
        "avg_coop_distance",
        "tasks_completed",
        "rejected_bits",
    ];

    pub fn metrics(&self) -> MetricsRecord {
        MetricsRecord {
            throughput: self.throughput,
            mean_delay: self.mean_delay,
            p95_delay: self.p95_delay,
            avg_coop_distance: self.avg_coop_distance,
            tasks_completed: self.tasks_completed,
            rejected_bits: self.rejected_bits,
        }
    }
}

/// Means and 95% half-widths of one (value, strategy) cell. Half-widths are empty for one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub family: &'static str,
    pub value: f64,
    pub strategy: &'static str,
    pub replications: usize,
    pub throughput: f64,
    pub throughput_hw: Option<f64>,
    pub mean_delay: f64,
    pub mean_delay_hw: Option<f64>,
    pub p95_delay: f64,
    pub p95_delay_hw: Option<f64>,
    pub avg_coop_distance: f64,
    pub avg_coop_distance_hw: Option<f64>,
    pub tasks_completed: f64,
    pub tasks_completed_hw: Option<f64>,
    pub rejected_bits: f64,
    pub rejected_bits_hw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// Ordered by grid value, then strategy, then replication.
    pub rows: Vec<SweepRow>,
    /// Ordered by grid value, then strategy.
    pub aggregate: Vec<AggregateRow>,
}

impl SweepOutput {
    /// Rows of one (value, strategy) cell in replication order.
    pub fn cell(&self, value: f64, strategy: Strategy) -> impl Iterator<Item = &SweepRow> {
        let name = strategy.name();
        self.rows.iter().filter(move |r| r.value == value && r.strategy == name)
    }

    pub fn summary(&self, value: f64, strategy: Strategy) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|a| a.value == value && a.strategy == strategy.name())
    }
}

/// Thread pool sized from [`WORKERS_ENV`].
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v:?} is not a worker count"))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Runs every (value, strategy, replication) cell. Replication `r` uses seed `base_seed + r`
/// for both the topology and the run, so all strategies at a grid point share topologies.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutput> {
    spec.validate()?;
    let cells: Vec<(f64, usize)> =
        spec.grid.iter().flat_map(|&v| (0..spec.replications).map(move |r| (v, r))).collect();
    let pool = worker_pool()?;
    let results: Vec<Vec<SweepRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(v, r)| -> Result<Vec<SweepRow>> {
                let cfg = spec.family.apply(&spec.fixed, v);
                let seed = spec.base_seed + r as u64;
                let topo = generate(&cfg, seed)?;
                spec.strategies
                    .iter()
                    .map(|&s| {
                        let m = run(&cfg, &topo, s, seed)?.metrics;
                        Ok(SweepRow {
                            family: spec.family.name(),
                            value: v,
                            strategy: s.name(),
                            seed,
                            throughput: m.throughput,
                            mean_delay: m.mean_delay,
                            p95_delay: m.p95_delay,
                            avg_coop_distance: m.avg_coop_distance,
                            tasks_completed: m.tasks_completed,
                            rejected_bits: m.rejected_bits,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::with_capacity(cells.len() * spec.strategies.len());
    let mut aggregate_rows = Vec::new();
    for &v in &spec.grid {
        for (si, &s) in spec.strategies.iter().enumerate() {
            let start = rows.len();
            for ((cv, _), per) in cells.iter().zip(&results) {
                if *cv == v {
                    rows.push(per[si].clone());
                }
            }
            let ms: Vec<MetricsRecord> = rows[start..].iter().map(SweepRow::metrics).collect();
            let a = aggregate(&ms);
            let pair = |x: Summary| (x.mean, x.half_width);
            let (throughput, throughput_hw) = pair(a.throughput);
            let (mean_delay, mean_delay_hw) = pair(a.mean_delay);
            let (p95_delay, p95_delay_hw) = pair(a.p95_delay);
            let (avg_coop_distance, avg_coop_distance_hw) = pair(a.avg_coop_distance);
            let (tasks_completed, tasks_completed_hw) = pair(a.tasks_completed);
            let (rejected_bits, rejected_bits_hw) = pair(a.rejected_bits);
            aggregate_rows.push(AggregateRow {
                family: spec.family.name(),
                value: v,
                strategy: s.name(),
                replications: ms.len(),
                throughput,
                throughput_hw,
                mean_delay,
                mean_delay_hw,
                p95_delay,
                p95_delay_hw,
                avg_coop_distance,
                avg_coop_distance_hw,
                tasks_completed,
                tasks_completed_hw,
                rejected_bits,
                rejected_bits_hw,
            });
        }
    }
    Ok(SweepOutput { rows, aggregate: aggregate_rows })
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header-only safe: writes the header even when `rows` is empty.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut buf = Vec::new();
    if rows.is_empty() {
        writeln!(buf, "{}", SweepRow::HEADER.join(","))?;
    } else {
        write_csv(rows, &mut buf)?;
    }
    Ok(String::from_utf8(buf)?)
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = SimConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(bad) = conet::validate_config(&cfg).first() {
        bail!("{}: {}: {}", path.display(), bad.field, bad.message);
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub id: u64,
    pub created_at: f64,
    pub size: f64,
    pub alpha: f64,
    pub predicted_delay: f64,
    pub delay: Option<f64>,
    pub distance: f64,
    pub levels: usize,
    pub participants: usize,
    pub rejected: bool,
}

pub fn trace_rows(res: &RunResult) -> Vec<TraceRow> {
    res.trace
        .iter()
        .map(|t| TraceRow {
            id: t.id,
            created_at: t.created_at,
            size: t.size,
            alpha: t.alpha,
            predicted_delay: t.predicted_delay,
            delay: t.delay,
            distance: t.distance,
            levels: t.levels,
            participants: t.participants,
            rejected: t.rejected,
        })
        .collect()
}

/// One run on the topology generated from `seed`.
pub fn run_single(cfg: &SimConfig, strategy: Strategy, seed: u64) -> Result<RunResult> {
    let topo = generate(cfg, seed)?;
    Ok(run(cfg, &topo, strategy, seed)?)
}

/// Metrics of a single run as a one-row CSV with the sweep columns.
pub fn single_csv(res: &RunResult) -> Result<String> {
    let m = res.metrics;
    let row = SweepRow {
        family: "single",
        value: 0.0,
        strategy: res.strategy.name(),
        seed: res.seed,
        throughput: m.throughput,
        mean_delay: m.mean_delay,
        p95_delay: m.p95_delay,
        avg_coop_distance: m.avg_coop_distance,
        tasks_completed: m.tasks_completed,
        rejected_bits: m.rejected_bits,
    };
    sweep_csv(&[row])
}

/// A random snapshot of at most `max_servers` servers in one tree rooted at server 0, with
/// attributes drawn from `cfg`'s ranges and backlogs of up to one task on every queue.
pub fn random_snapshot(
    cfg: &SimConfig,
    max_servers: usize,
    rng: &mut impl Rng,
) -> (Vec<ServerState>, CooperationForest, MobileUser) {
    let n = rng.random_range(1..=max_servers.max(1));
    let task = cfg.task_size_range.hi;
    let draw = |r: Interval, rng: &mut dyn rand::RngCore| if r.lo < r.hi { rng.random_range(r.lo..r.hi) } else { r.lo };
    let mut parent = vec![None; n];
    for (i, p) in parent.iter_mut().enumerate().skip(1) {
        *p = Some(rng.random_range(0..i));
    }
    let states = (0..n)
        .map(|i| {
            let fwd = draw(cfg.fwd_cpu_range, rng);
            let mut s = ServerState::idle(i, draw(cfg.cpu_range, rng), fwd, cfg.fwd_cost(fwd), Vec::new());
            s.q_proc = rng.random_range(0.0..=task);
            s.q_tf = rng.random_range(0.0..=task);
            s.q_rf = rng.random_range(0.0..=cfg.result_ratio * task);
            s
        })
        .collect();
    let user = MobileUser { id: 0, cpu_hz: cfg.user_cpu, fwd_cost: cfg.user_fwd_cost(), home: 0 };
    (states, CooperationForest::from_parents(parent), user)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioStudy {
    pub reports: Vec<RatioReport>,
    /// Largest Δ over exact rows.
    pub max_delta: Option<f64>,
    pub passed: usize,
}

impl RatioStudy {
    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", RatioReport::CSV_HEADER);
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let exact = self.reports.iter().filter(|r| r.exact).count();
        let max = self.max_delta.map_or_else(|| "none".to_string(), |d| d.to_string());
        format!("instances {} exact {} within_bound {} max_delta {}", self.reports.len(), exact, self.passed, max)
    }
}

/// `n` random snapshots of at most `max_servers` servers; the task is the configured maximum
/// size cut into `units` pieces.
pub fn run_ratio_study(cfg: &SimConfig, n: usize, seed: u64, max_servers: usize, units: usize) -> Result<RatioStudy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.params();
    let t = cfg.task_size_range.hi;
    let mut reports = Vec::with_capacity(n);
    for _ in 0..n {
        let (states, forest, user) = random_snapshot(cfg, max_servers, &mut rng);
        let caps = announce_round(&forest, &states, 0, &p)?;
        reports.push(measure_ratio(&forest, &caps, &states, &user, t, &p, units, SolveMode::Auto)?);
    }
    let exact: Vec<&RatioReport> = reports.iter().filter(|r| r.exact).collect();
    let max_delta = exact.iter().filter_map(|r| r.delta).reduce(f64::max);
    let passed = exact.iter().filter(|r| bound_check(r)).count();
    Ok(RatioStudy { reports, max_delta, passed })
}
