//! Domain types shared across the simulator.
//!
//! Internal units are SI throughout: seconds, bits, cycles per second.
//! Capabilities (`c`, `Cd`) are carried as bits per unit delay `D_u`.
//!
//! Symbol map:
//!
//! | symbol | home |
//! |---|---|
//! | `f_s`, `Ca_s = κ/f_s` | [`ServerState::cpu_hz`], [`ServerState::compute_cost`] |
//! | `q_s`, `q^tf_s`, `q^rf_s` | [`ServerState::q_proc`], [`ServerState::q_tf`], [`ServerState::q_rf`] |
//! | `c^tf_s = c^rf_s` | [`ServerState::fwd_cost`] |
//! | `f_m`, `c^f_m` | [`MobileUser::cpu_hz`], [`MobileUser::fwd_cost`] |
//! | `T` | [`Task::size`] |
//! | `γ`, `κ`, `D_u` | [`SimConfig::result_ratio`], [`SimConfig::cycles_per_bit`], [`SimConfig::unit_delay`] |
//! | `c^i_s`, `Cd_s`, `k_s` | [`CapabilityTable::announced`], [`CapabilityTable::unit_delay`], [`CapabilityTable::k`] |
//! | `α`, `β_s`, `T'_s`, `D_m` | [`DivisionPlan::alpha`], [`ServerShare::beta`], [`ServerShare::bits`], [`DivisionPlan::predicted_delay`] |
//! | `μ`, `Σ D^rf`, `Σ D^tf` | [`ServerShare::mu`], [`ServerShare::acc_rf`], [`ServerShare::acc_tf`] |
//!
//! ```
//! use conet::model::*;
//! let s = ServerState::idle(0, 8e9, 10e9, 5e-9, vec![1]);
//! let _ = (s.cpu_hz, s.q_proc, s.q_tf, s.q_rf, s.fwd_cost, s.compute_cost(500.0));
//! let u = MobileUser { id: 0, cpu_hz: 2.5e9, fwd_cost: 1e-10, home: 0 };
//! let _ = (u.cpu_hz, u.fwd_cost);
//! let cfg = SimConfig::default();
//! let _ = (cfg.result_ratio, cfg.cycles_per_bit, cfg.unit_delay);
//! let t = CapabilityTable::initial(&[s], &cfg.params());
//! let _ = (&t.announced, &t.unit_delay, &t.k);
//! let p = DivisionPlan::local(4e6, 1.6);
//! let _ = (p.alpha, p.predicted_delay, &p.shares);
//! ```

use serde::{Deserialize, Serialize};
use crate::capacity::{bcu_components, DelayProfile};

pub type ServerId = usize;

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Order in which servers pick their hosts during forest construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    #[default]
    Ascending,
    /// Fresh permutation per rebuild, drawn from the run seed.
    Random,
}

/// Which neighbors a server may pick as its host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ForestGrowth {
    /// Any neighbor outside the server's own subtree.
    Free,
    /// Only neighbors one hop closer to the user's home server.
    #[default]
    Layered,
}

/// Which load the announcement charges to forwarding queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnnounceLoad {
    /// Backlogs only; the prospective task terms are zero.
    QueueOnly,
    /// Each server is also charged for forwarding the bits it announces.
    #[default]
    UnitDelay,
}

/// Where the planner takes its children's delay profiles from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    /// Rebuilt from the queues at each planning instant.
    #[default]
    Snapshot,
    /// Whatever the last announcement round carried.
    Announced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_servers: usize,
    pub degree_max: usize,
    /// Server CPU frequency, Hz.
    pub cpu_range: Interval,
    /// Forwarding engine frequency, Hz.
    pub fwd_cpu_range: Interval,
    /// Task size, bits.
    pub task_size_range: Interval,
    pub result_ratio: f64,
    pub cycles_per_bit: f64,
    /// Cycles spent per forwarded bit.
    pub fwd_cycles_per_bit: f64,
    /// Tasks per second generated by the mobile user.
    pub gen_rate: f64,
    pub unit_delay: f64,
    pub announce_period: f64,
    pub q_max: f64,
    pub qf_max: f64,
    pub sim_horizon: f64,
    pub seed: u64,
    /// Mobile user CPU frequency, Hz.
    pub user_cpu: f64,
    /// Mobile user uplink rate, bits/s. Zero means the uplink is free.
    pub user_uplink: f64,
    /// Background load in units of the mobile user's own rate, spread over all servers.
    pub ambient_users: f64,
    pub order: OrderPolicy,
    pub growth: ForestGrowth,
    pub announce_load: AnnounceLoad,
    pub profiles: ProfileSource,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_servers: 120,
            degree_max: 5,
            cpu_range: Interval::new(4e9, 12e9),
            fwd_cpu_range: Interval::new(5e9, 15e9),
            task_size_range: Interval::point(4e6),
            result_ratio: 0.2,
            cycles_per_bit: 500.0,
            fwd_cycles_per_bit: 10.0,
            gen_rate: 0.5,
            unit_delay: 1.0,
            announce_period: 1.0,
            q_max: 8e9,
            qf_max: 2e9,
            sim_horizon: 200.0,
            seed: 1,
            user_cpu: 2.5e9,
            user_uplink: 1e10,
            ambient_users: 100.0,
            order: OrderPolicy::Ascending,
            growth: ForestGrowth::Layered,
            announce_load: AnnounceLoad::UnitDelay,
            profiles: ProfileSource::Snapshot,
        }
    }
}

/// The scalar model constants every delay formula needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub kappa: f64,
    pub gamma: f64,
    pub unit_delay: f64,
    pub announce_load: AnnounceLoad,
}

impl SimConfig {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            kappa: self.cycles_per_bit,
            gamma: self.result_ratio,
            unit_delay: self.unit_delay,
            announce_load: self.announce_load,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, crate::Error> {
        toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seconds per bit on a forwarding engine running at `hz`.
    pub fn fwd_cost(&self, hz: f64) -> f64 {
        self.fwd_cycles_per_bit / hz
    }

    pub fn user_fwd_cost(&self) -> f64 {
        if self.user_uplink > 0.0 {
            1.0 / self.user_uplink
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

pub fn validate_config(cfg: &SimConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut bad = |field: &'static str, message: String| out.push(Violation { field, message });

    if !(cfg.result_ratio > 0.0 && cfg.result_ratio < 1.0) {
        bad("result_ratio", format!("must lie in (0, 1), got {}", cfg.result_ratio));
    }
    for (field, r) in [
        ("cpu_range", cfg.cpu_range),
        ("fwd_cpu_range", cfg.fwd_cpu_range),
        ("task_size_range", cfg.task_size_range),
    ] {
        if !(r.lo > 0.0 && r.lo.is_finite() && r.hi.is_finite()) {
            bad(field, format!("lower end must be positive and finite, got {}", r.lo));
        } else if r.lo > r.hi {
            bad(field, format!("lo {} exceeds hi {}", r.lo, r.hi));
        }
    }
    if !(cfg.unit_delay > 0.0) {
        bad("unit_delay", format!("must be positive, got {}", cfg.unit_delay));
    }
    if !(cfg.cycles_per_bit >= 1.0) {
        bad("cycles_per_bit", format!("must be at least 1, got {}", cfg.cycles_per_bit));
    }
    if !(cfg.fwd_cycles_per_bit >= 0.0) {
        bad("fwd_cycles_per_bit", format!("must be non-negative, got {}", cfg.fwd_cycles_per_bit));
    }
    if cfg.n_servers < 1 {
        bad("n_servers", "need at least one server".into());
    }
    if cfg.degree_max < 1 {
        bad("degree_max", "must be at least 1".into());
    }
    if !(cfg.gen_rate >= 0.0 && cfg.gen_rate.is_finite()) {
        bad("gen_rate", format!("must be non-negative, got {}", cfg.gen_rate));
    }
    if !(cfg.announce_period > 0.0) {
        bad("announce_period", format!("must be positive, got {}", cfg.announce_period));
    }
    if !(cfg.q_max > 0.0) {
        bad("q_max", format!("must be positive, got {}", cfg.q_max));
    }
    if !(cfg.qf_max > 0.0) {
        bad("qf_max", format!("must be positive, got {}", cfg.qf_max));
    }
    if !(cfg.sim_horizon >= 0.0 && cfg.sim_horizon.is_finite()) {
        bad("sim_horizon", format!("must be non-negative, got {}", cfg.sim_horizon));
    }
    if !(cfg.user_cpu > 0.0) {
        bad("user_cpu", format!("must be positive, got {}", cfg.user_cpu));
    }
    if !(cfg.user_uplink >= 0.0) {
        bad("user_uplink", format!("must be non-negative, got {}", cfg.user_uplink));
    }
    if !(cfg.ambient_users >= 0.0 && cfg.ambient_users.is_finite()) {
        bad("ambient_users", format!("must be non-negative, got {}", cfg.ambient_users));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub id: ServerId,
    /// CPU frequency `f_s`, Hz.
    pub cpu_hz: f64,
    /// Forwarding engine frequency, Hz. Kept for dumps; delays use `fwd_cost`.
    pub fwd_hz: f64,
    /// Seconds per forwarded bit, shared by task and result forwarding.
    pub fwd_cost: f64,
    pub q_proc: f64,
    pub q_tf: f64,
    pub q_rf: f64,
    pub neighbors: Vec<ServerId>,
}

impl ServerState {
    pub fn idle(id: ServerId, cpu_hz: f64, fwd_hz: f64, fwd_cost: f64, neighbors: Vec<ServerId>) -> Self {
        Self { id, cpu_hz, fwd_hz, fwd_cost, q_proc: 0.0, q_tf: 0.0, q_rf: 0.0, neighbors }
    }

    /// `Ca_s`, seconds per bit of processing.
    pub fn compute_cost(&self, kappa: f64) -> f64 {
        kappa / self.cpu_hz
    }

    /// Processing rate `f_s/κ`, bits per second.
    pub fn rate(&self, kappa: f64) -> f64 {
        self.cpu_hz / kappa
    }

    pub fn q_fwd(&self) -> f64 {
        self.q_tf + self.q_rf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobileUser {
    pub id: usize,
    pub cpu_hz: f64,
    /// Seconds per bit offloaded to the home server.
    pub fwd_cost: f64,
    pub home: ServerId,
}

impl MobileUser {
    pub fn rate(&self, kappa: f64) -> f64 {
        self.cpu_hz / kappa
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub id: u64,
    pub size: f64,
    pub created_at: f64,
    pub owner: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapabilityTable {
    pub round: u64,
    /// `c^i_s`, bits per unit delay.
    pub announced: Vec<f64>,
    /// Own host-form `Cd_s`, bits per unit delay.
    pub unit_delay: Vec<f64>,
    /// Child-form `Cd` as seen by the parent; equals `announced` for roots.
    pub contribution: Vec<f64>,
    pub k: Vec<f64>,
    /// Bits each subtree finishes by a given delay, as seen on arrival at its root.
    pub profile: Vec<DelayProfile>,
}

impl CapabilityTable {
    /// Round zero: every server announces its bare processing capability.
    pub fn initial(states: &[ServerState], p: &ModelParams) -> Self {
        let c: Vec<f64> = states.iter().map(|s| s.rate(p.kappa) * p.unit_delay).collect();
        Self {
            round: 0,
            announced: c.clone(),
            unit_delay: c.clone(),
            contribution: c,
            k: vec![0.0; states.len()],
            profile: states.iter().map(|s| DelayProfile::sum(&bcu_components(s, &[], p))).collect(),
        }
    }
}

/// One server's part in a division plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerShare {
    pub server: ServerId,
    pub parent: Option<ServerId>,
    /// 1 for the home server.
    pub level: usize,
    /// Bits this server received for itself and its subtree.
    pub received: f64,
    /// Bits this server processes, `T'_s`.
    pub bits: f64,
    /// Share of the parent BCU's input given to this server's subtree (1 for the home server).
    pub beta: f64,
    /// Fraction of `received` kept for local processing.
    pub beta_own: f64,
    /// Accumulated result-forwarding delay from the home server down to this server.
    pub acc_rf: f64,
    /// Accumulated task-forwarding delay from the home server down to this server.
    pub acc_tf: f64,
    /// Queueing delay of the processing backlog, `q_s·κ/f_s`.
    pub mu: f64,
    /// Result delay of the edge into this server (zero at the home server).
    pub edge_rf: f64,
    /// Task delay of the edge into this server (zero at the home server).
    pub edge_tf: f64,
    /// Delay of this server's own bits counted from their arrival, host form.
    pub bcu_delay: f64,
    /// `bcu_delay` plus the accumulated forwarding overhead above this server.
    pub predicted_delay: f64,
}

/// A root-to-leaf path of the plan tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Servers along the path, home first.
    pub path: Vec<ServerId>,
    pub levels_used: usize,
    /// True when a child of the leaf was cut off by the terminal condition.
    pub terminated: bool,
    /// The first pruned child, with its tentative edge delays and queueing term.
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub server: ServerId,
    pub edge_rf: f64,
    pub edge_tf: f64,
    pub mu: f64,
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivisionPlan {
    pub total: f64,
    pub alpha: f64,
    pub offload_allowed: bool,
    pub predicted_delay: f64,
    /// Predicted delay of the user's local share.
    pub user_delay: f64,
    /// Depth-first order, parents before children.
    pub shares: Vec<ServerShare>,
    pub branches: Vec<Branch>,
}

impl DivisionPlan {
    pub fn local(total: f64, delay: f64) -> Self {
        Self {
            total,
            alpha: 1.0,
            offload_allowed: false,
            predicted_delay: delay,
            user_delay: delay,
            shares: Vec::new(),
            branches: Vec::new(),
        }
    }

    pub fn offloaded_bits(&self) -> f64 {
        self.shares.iter().map(|s| s.bits).sum()
    }

    pub fn share_of(&self, id: ServerId) -> Option<&ServerShare> {
        self.shares.iter().find(|s| s.server == id)
    }

    pub fn max_levels(&self) -> usize {
        self.branches.iter().map(|b| b.levels_used).max().unwrap_or(0)
    }

    /// One line per participating server: id, level, bits, predicted delay.
    pub fn trace(&self) -> String {
        let mut out = format!("user alpha={} bits={} delay={}\n", self.alpha, self.alpha * self.total, self.user_delay);
        for s in &self.shares {
            out.push_str(&format!("{} {} {} {}\n", s.server, s.level, s.bits, s.predicted_delay));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRecord {
    /// Completed bits over the summed delay of completed tasks, bits/s.
    pub throughput: f64,
    pub mean_delay: f64,
    pub p95_delay: f64,
    pub avg_coop_distance: f64,
    pub tasks_completed: u64,
    pub rejected_bits: f64,
}
