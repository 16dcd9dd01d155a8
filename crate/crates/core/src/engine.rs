//! Event loop.
//!
//! Every server owns three FIFO queues (processing, task forwarding, result
//! forwarding) and the user owns a CPU queue and an uplink. The offloaded bits
//! travel down the plan tree through task-forwarding queues, each server
//! processes its own share, and results climb back to the user through
//! result-forwarding queues.
//!
//! A planned task joins every queue on its path at plan time: its slots are
//! reserved then, so work arriving later queues behind it even if the task's
//! bits have not physically reached that server yet.
//!
//! Besides the mobile user, an optional ambient stream of tasks from other,
//! non-cooperating users lands directly on server processing queues. It is
//! what makes per-server load depend on the server count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;

use crate::bcu::{build_forest, build_layered_forest, processing_order, CooperationForest};
use crate::capacity::{announce_round, subtree_profiles};
use crate::division::plan_division;
use crate::model::{CapabilityTable, DivisionPlan, ForestGrowth, MetricsRecord, MobileUser, ModelParams, ProfileSource, ServerId, ServerState, SimConfig, Task};
use crate::topology::Topology;
use crate::Error;

const ARRIVAL_STREAM: u64 = 1;
const SIZE_STREAM: u64 = 2;
const AMBIENT_STREAM: u64 = 3;
const ORDER_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    CoNet,
    OneHop,
    NoCooperation,
    Local,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::CoNet, Strategy::OneHop, Strategy::NoCooperation, Strategy::Local];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::CoNet => "conet",
            Strategy::OneHop => "one-hop",
            Strategy::NoCooperation => "no-cooperation",
            Strategy::Local => "local",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conet" => Ok(Strategy::CoNet),
            "one-hop" | "onehop" => Ok(Strategy::OneHop),
            "no-cooperation" | "nocooperation" => Ok(Strategy::NoCooperation),
            "local" => Ok(Strategy::Local),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Share-weighted mean hop level of the servers that process bits; 0 for all-local plans.
pub fn coop_distance(plan: &DivisionPlan) -> f64 {
    let bits: f64 = plan.shares.iter().map(|s| s.bits).sum();
    if bits <= 0.0 {
        return 0.0;
    }
    plan.shares.iter().map(|s| s.bits * s.level as f64).sum::<f64>() / bits
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub id: u64,
    pub created_at: f64,
    pub size: f64,
    pub alpha: f64,
    pub predicted_delay: f64,
    /// `None` until completion, or forever if rejected.
    pub delay: Option<f64>,
    pub distance: f64,
    pub levels: usize,
    pub participants: usize,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub config: SimConfig,
    pub metrics: MetricsRecord,
    pub trace: Vec<TaskRecord>,
    pub forest_rebuilds: u64,
    pub components: usize,
    pub ambient_bits: f64,
    pub ambient_rejected_bits: f64,
    /// Largest relative violation of generated = processed + outstanding + rejected seen at any event.
    pub conservation_error: f64,
}

#[derive(Debug, Clone, Copy)]
struct Fifo {
    rate: f64,
    busy_until: f64,
}

impl Fifo {
    fn new(rate: f64) -> Self {
        Self { rate, busy_until: 0.0 }
    }

    fn from_cost(cost: f64) -> Self {
        Self::new(if cost > 0.0 { 1.0 / cost } else { f64::INFINITY })
    }

    fn backlog(&self, now: f64) -> f64 {
        if self.rate.is_infinite() {
            0.0
        } else {
            (self.busy_until - now).max(0.0) * self.rate
        }
    }

    fn load(&self, now: f64) -> f64 {
        self.backlog(now)
    }

    /// Enqueue `bits` arriving now; returns the time they leave the queue.
    fn push(&mut self, now: f64, bits: f64) -> f64 {
        let start = self.busy_until.max(now);
        self.busy_until = start + bits / self.rate;
        self.busy_until
    }
}

struct ServerQueues {
    proc: Fifo,
    tf: Fifo,
    rf: Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Processed { bits: f64 },
    AmbientDone { bits: f64 },
    Delivered { task: usize },
    Announce,
    AmbientArrival,
    UserArrival,
}

impl Kind {
    fn rank(&self) -> u8 {
        match self {
            Kind::Processed { .. } | Kind::AmbientDone { .. } => 0,
            Kind::Delivered { .. } => 1,
            Kind::Announce => 2,
            Kind::AmbientArrival => 3,
            Kind::UserArrival => 4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.rank().cmp(&self.kind.rank()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Node {
    server: ServerId,
    parent: Option<usize>,
    own: f64,
    subtree: f64,
    children: Vec<usize>,
}

struct Live {
    record: usize,
    pending: usize,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    topo: &'a Topology,
    strategy: Strategy,
    p: ModelParams,
    now: f64,
    seq: u64,
    heap: BinaryHeap<Event>,
    servers: Vec<ServerQueues>,
    user_cpu: Fifo,
    uplink: Fifo,
    forest: CooperationForest,
    caps: CapabilityTable,
    order_rng: ChaCha8Rng,
    live: Vec<Live>,
    trace: Vec<TaskRecord>,
    next_task: u64,
    rebuilds: u64,
    generated: f64,
    processed: f64,
    outstanding: f64,
    rejected: f64,
    ambient_bits: f64,
    ambient_rejected: f64,
    conservation_error: f64,
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Event { time, seq: self.seq, kind });
    }

    fn snapshot(&self) -> Vec<ServerState> {
        self.topo
            .servers
            .iter()
            .zip(&self.servers)
            .map(|(s, q)| ServerState {
                q_proc: q.proc.load(self.now),
                q_tf: q.tf.load(self.now),
                q_rf: q.rf.load(self.now),
                ..s.clone()
            })
            .collect()
    }

    fn announce(&mut self) -> Result<(), Error> {
        if self.strategy == Strategy::Local {
            return Ok(());
        }
        let states = self.snapshot();
        let home = self.topo.user.home;
        self.forest = match self.strategy {
            Strategy::NoCooperation => CooperationForest::from_parents(vec![None; states.len()]),
            _ => {
                let order = processing_order(states.len(), self.cfg.order, &mut self.order_rng);
                let full = match self.cfg.growth {
                    ForestGrowth::Free => build_forest(&states, &order, &[home], self.p.kappa),
                    ForestGrowth::Layered => build_layered_forest(&states, &order, home, self.p.kappa),
                };
                let depth = if self.strategy == Strategy::OneHop { 1 } else { usize::MAX };
                full.restricted(home, depth)
            }
        };
        self.caps = announce_round(&self.forest, &states, self.caps.round, &self.p)?;
        self.rebuilds += 1;
        Ok(())
    }

    fn plan(&self, states: &[ServerState], size: f64) -> Result<DivisionPlan, Error> {
        let user = &self.topo.user;
        if self.strategy == Strategy::Local {
            return Ok(DivisionPlan::local(size, size / user.rate(self.p.kappa)));
        }
        plan_division(&self.forest, &self.caps, states, user, size, &self.p)
    }

    fn nodes_of(plan: &DivisionPlan) -> Vec<Node> {
        let mut nodes: Vec<Node> = plan
            .shares
            .iter()
            .map(|s| Node { server: s.server, parent: None, own: s.bits, subtree: s.received, children: Vec::new() })
            .collect();
        for (i, s) in plan.shares.iter().enumerate() {
            if let Some(p) = s.parent {
                let pi = plan.shares[..i].iter().rposition(|x| x.server == p).expect("parent precedes child");
                nodes[i].parent = Some(pi);
                nodes[pi].children.push(i);
            }
        }
        nodes
    }

    fn fits(&self, nodes: &[Node]) -> bool {
        nodes.iter().all(|n| {
            let q = &self.servers[n.server];
            let fwd = n.subtree - n.own + self.p.gamma * n.subtree;
            q.proc.load(self.now) + n.own <= self.cfg.q_max
                && q.tf.load(self.now) + q.rf.load(self.now) + fwd <= self.cfg.qf_max
        })
    }

    fn on_user_arrival(&mut self, size: f64, observer: &mut dyn FnMut(&Snapshot<'_>)) -> Result<(), Error> {
        let task = Task { id: self.next_task, size, created_at: self.now, owner: self.topo.user.id };
        self.next_task += 1;
        self.generated += size;
        let states = self.snapshot();
        if self.cfg.profiles == ProfileSource::Snapshot && self.strategy != Strategy::Local {
            self.caps.profile = subtree_profiles(&self.forest, &states, &self.p)?;
        }
        let plan = self.plan(&states, size)?;
        observer(&Snapshot {
            time: self.now,
            states: &states,
            forest: &self.forest,
            caps: &self.caps,
            user: &self.topo.user,
            params: &self.p,
            plan: &plan,
        });
        let nodes = Self::nodes_of(&plan);
        let record = TaskRecord {
            id: task.id,
            created_at: task.created_at,
            size,
            alpha: plan.alpha,
            predicted_delay: plan.predicted_delay,
            delay: None,
            distance: coop_distance(&plan),
            levels: plan.max_levels(),
            participants: plan.shares.iter().filter(|s| s.bits > 0.0).count(),
            rejected: false,
        };
        self.trace.push(record);
        let rec = self.trace.len() - 1;

        if !self.fits(&nodes) {
            self.trace[rec].rejected = true;
            self.rejected += size;
            return Ok(());
        }
        self.outstanding += size;

        let local = plan.alpha * size;
        let offloaded: f64 = size - local;
        let idx = self.live.len();
        let mut pending = 0;
        if local > 0.0 {
            let done = self.user_cpu.push(self.now, local);
            self.schedule(done, Kind::Processed { bits: local });
            self.schedule(done, Kind::Delivered { task: idx });
            pending += 1;
        }
        if !nodes.is_empty() {
            // Parents precede children, so arrival times are known when each node is reached.
            let mut arrive = vec![0.0; nodes.len()];
            arrive[0] = self.uplink.push(self.now, offloaded);
            for i in 0..nodes.len() {
                let n = &nodes[i];
                let q = &mut self.servers[n.server];
                for &c in &n.children {
                    arrive[c] = q.tf.push(arrive[i], nodes[c].subtree);
                }
                if n.own <= 0.0 {
                    continue;
                }
                let done = q.proc.push(arrive[i], n.own);
                self.schedule(done, Kind::Processed { bits: n.own });
                let result = self.p.gamma * n.own;
                let mut at = Some(i);
                let mut t = done;
                while let Some(k) = at {
                    t = self.servers[nodes[k].server].rf.push(t, result);
                    at = nodes[k].parent;
                }
                self.schedule(t, Kind::Delivered { task: idx });
                pending += 1;
            }
        }
        self.live.push(Live { record: rec, pending });
        Ok(())
    }

    fn on_processed(&mut self, bits: f64) {
        self.processed += bits;
        self.outstanding -= bits;
    }

    fn on_delivered(&mut self, task: usize) {
        let live = &mut self.live[task];
        live.pending -= 1;
        if live.pending == 0 {
            let rec = &mut self.trace[live.record];
            rec.delay = Some(self.now - rec.created_at);
        }
    }

    fn check_conservation(&mut self) {
        let lhs = self.generated;
        let rhs = self.processed + self.outstanding + self.rejected;
        if lhs > 0.0 {
            self.conservation_error = self.conservation_error.max((lhs - rhs).abs() / lhs);
        }
    }
}

/// What the planner saw when a user task arrived, and what it decided.
pub struct Snapshot<'s> {
    pub time: f64,
    pub states: &'s [ServerState],
    pub forest: &'s CooperationForest,
    pub caps: &'s CapabilityTable,
    pub user: &'s MobileUser,
    pub params: &'s ModelParams,
    pub plan: &'s DivisionPlan,
}

/// Simulates one run. The topology is taken as given; `seed` drives arrivals and ordering.
pub fn run(cfg: &SimConfig, topo: &Topology, strategy: Strategy, seed: u64) -> Result<RunResult, Error> {
    run_observed(cfg, topo, strategy, seed, &mut |_| {})
}

/// [`run`], calling `observer` at every user arrival before the plan is admitted.
pub fn run_observed(
    cfg: &SimConfig,
    topo: &Topology,
    strategy: Strategy,
    seed: u64,
    observer: &mut dyn FnMut(&Snapshot<'_>),
) -> Result<RunResult, Error> {
    let violations = crate::model::validate_config(cfg);
    if let Some(v) = violations.first() {
        return Err(Error::Config(format!("{}: {}", v.field, v.message)));
    }
    let p = cfg.params();
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let mut arrivals = stream(ARRIVAL_STREAM);
    let mut sizes = stream(SIZE_STREAM);
    let mut ambient = stream(AMBIENT_STREAM);

    let servers = topo
        .servers
        .iter()
        .map(|s| ServerQueues {
            proc: Fifo::new(s.rate(p.kappa)),
            tf: Fifo::from_cost(s.fwd_cost),
            rf: Fifo::from_cost(s.fwd_cost),
        })
        .collect();
    let n = topo.len();
    let mut sim = Sim {
        cfg,
        topo,
        strategy,
        p,
        now: 0.0,
        seq: 0,
        heap: BinaryHeap::new(),
        servers,
        user_cpu: Fifo::new(topo.user.rate(p.kappa)),
        uplink: Fifo::from_cost(topo.user.fwd_cost),
        forest: CooperationForest::from_parents(vec![None; n]),
        caps: CapabilityTable::initial(&topo.servers, &p),
        order_rng: stream(ORDER_STREAM),
        live: Vec::new(),
        trace: Vec::new(),
        next_task: 0,
        rebuilds: 0,
        generated: 0.0,
        processed: 0.0,
        outstanding: 0.0,
        rejected: 0.0,
        ambient_bits: 0.0,
        ambient_rejected: 0.0,
        conservation_error: 0.0,
    };

    let horizon = cfg.sim_horizon;
    let user_exp = (cfg.gen_rate > 0.0).then(|| Exp::new(cfg.gen_rate).expect("positive rate"));
    let ambient_rate = cfg.ambient_users * cfg.gen_rate;
    let ambient_exp = (ambient_rate > 0.0).then(|| Exp::new(ambient_rate).expect("positive rate"));
    let weights = WeightedIndex::new(topo.servers.iter().map(|s| s.cpu_hz)).expect("positive frequencies");
    let draw_size = |rng: &mut ChaCha8Rng| rng.random_range(cfg.task_size_range.lo..=cfg.task_size_range.hi);

    sim.schedule(0.0, Kind::Announce);
    if let Some(e) = &user_exp {
        let t = e.sample(&mut arrivals);
        if t < horizon {
            sim.schedule(t, Kind::UserArrival);
        }
    }
    if let Some(e) = &ambient_exp {
        let t = e.sample(&mut ambient);
        if t < horizon {
            sim.schedule(t, Kind::AmbientArrival);
        }
    }

    while let Some(ev) = sim.heap.pop() {
        debug_assert!(ev.time >= sim.now);
        sim.now = ev.time;
        match ev.kind {
            Kind::Announce => {
                sim.announce()?;
                let next = sim.now + cfg.announce_period;
                if next < horizon {
                    sim.schedule(next, Kind::Announce);
                }
            }
            Kind::UserArrival => {
                let size = draw_size(&mut sizes);
                sim.on_user_arrival(size, observer)?;
                let next = sim.now + user_exp.as_ref().unwrap().sample(&mut arrivals);
                if next < horizon {
                    sim.schedule(next, Kind::UserArrival);
                }
            }
            Kind::AmbientArrival => {
                let server = weights.sample(&mut ambient);
                let size = draw_size(&mut ambient);
                sim.generated += size;
                sim.ambient_bits += size;
                let q = &mut sim.servers[server].proc;
                if q.load(sim.now) + size > cfg.q_max {
                    sim.rejected += size;
                    sim.ambient_rejected += size;
                } else {
                    sim.outstanding += size;
                    let done = q.push(sim.now, size);
                    sim.schedule(done, Kind::AmbientDone { bits: size });
                }
                let next = sim.now + ambient_exp.as_ref().unwrap().sample(&mut ambient);
                if next < horizon {
                    sim.schedule(next, Kind::AmbientArrival);
                }
            }
            Kind::AmbientDone { bits } => {
                sim.processed += bits;
                sim.outstanding -= bits;
            }
            Kind::Processed { bits } => sim.on_processed(bits),
            Kind::Delivered { task } => sim.on_delivered(task),
        }
        sim.check_conservation();
    }

    let metrics = metrics_of(&sim.trace, sim.rejected - sim.ambient_rejected);
    Ok(RunResult {
        strategy,
        seed,
        config: cfg.clone(),
        metrics,
        trace: sim.trace,
        forest_rebuilds: sim.rebuilds,
        components: topo.component_count(),
        ambient_bits: sim.ambient_bits,
        ambient_rejected_bits: sim.ambient_rejected,
        conservation_error: sim.conservation_error,
    })
}

pub fn metrics_of(trace: &[TaskRecord], rejected_bits: f64) -> MetricsRecord {
    let done: Vec<&TaskRecord> = trace.iter().filter(|r| r.delay.is_some()).collect();
    if done.is_empty() {
        return MetricsRecord { rejected_bits, ..MetricsRecord::default() };
    }
    let mut delays: Vec<f64> = done.iter().map(|r| r.delay.unwrap()).collect();
    let total_delay: f64 = delays.iter().sum();
    let bits: f64 = done.iter().map(|r| r.size).sum();
    delays.sort_by(f64::total_cmp);
    let rank = ((0.95 * delays.len() as f64).ceil() as usize).clamp(1, delays.len());
    let offloaded: Vec<f64> = done.iter().filter(|r| r.alpha < 1.0).map(|r| r.distance).collect();
    MetricsRecord {
        throughput: if total_delay > 0.0 { bits / total_delay } else { 0.0 },
        mean_delay: total_delay / delays.len() as f64,
        p95_delay: delays[rank - 1],
        avg_coop_distance: if offloaded.is_empty() { 0.0 } else { offloaded.iter().sum::<f64>() / offloaded.len() as f64 },
        tasks_completed: done.len() as u64,
        rejected_bits,
    }
}

/// Sample mean with a 95% normal-approximation half-width (absent for a single sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub half_width: Option<f64>,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, half_width: None };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let half_width = (n >= 2).then(|| {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    });
    Summary { n, mean, half_width }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub throughput: Summary,
    pub mean_delay: Summary,
    pub p95_delay: Summary,
    pub avg_coop_distance: Summary,
    pub tasks_completed: Summary,
    pub rejected_bits: Summary,
}

pub fn aggregate(runs: &[MetricsRecord]) -> MetricsSummary {
    let col = |f: fn(&MetricsRecord) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
    MetricsSummary {
        throughput: col(|m| m.throughput),
        mean_delay: col(|m| m.mean_delay),
        p95_delay: col(|m| m.p95_delay),
        avg_coop_distance: col(|m| m.avg_coop_distance),
        tasks_completed: col(|m| m.tasks_completed as f64),
        rejected_bits: col(|m| m.rejected_bits),
    }
}
