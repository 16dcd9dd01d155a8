//! Task division: the user/home split, the per-BCU share computation and the
//! recursive descent with the terminal condition.
//!
//! Rates here are bits per second and forwarding costs seconds per bit, so a
//! capability announced as `c` bits per unit delay enters as `c / D_u`.
//!
//! [`divide_bcu`] is the closed-form split against a single capability per
//! child. [`plan_division`] splits against each child's delay profile instead,
//! which accounts for backlogs and the shared task queue, so every participant
//! of a plan ends at the same predicted delay.

use crate::bcu::CooperationForest;
use crate::capacity::{bcu_components, mu, relay_edge, processing_delay, result_fwd_delay, task_fwd_delay, DelayProfile};
use crate::model::{Branch, CapabilityTable, DivisionPlan, MobileUser, ModelParams, Probe, ServerId, ServerShare, ServerState};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffloadDecision {
    pub alpha: f64,
    pub offload_allowed: bool,
    pub predicted_delay: f64,
}

/// True when the split formula yields a user share inside `[0, 1]`.
///
/// `f_m` and `c` are rates in bits per second, `c_m_f` seconds per bit.
pub fn offload_gate(f_m: f64, c_m_f: f64, c: f64) -> bool {
    debug_assert!(f_m > 0.0 && c_m_f >= 0.0);
    c >= 0.0 && 1.0 - c_m_f * c >= 0.0
}

/// Equalizes the user's local delay with the offloaded part's delay.
pub fn split_user_server(t: f64, f_m: f64, c_m_f: f64, c: f64) -> Result<OffloadDecision, Error> {
    if !offload_gate(f_m, c_m_f, c) {
        return Ok(OffloadDecision { alpha: 1.0, offload_allowed: false, predicted_delay: t / f_m });
    }
    let local = f_m * (1.0 - c_m_f * c);
    let denom = c + local;
    if denom <= 0.0 {
        return Err(Error::Split(denom));
    }
    Ok(OffloadDecision { alpha: local / denom, offload_allowed: true, predicted_delay: t / denom })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcuSplit {
    /// Host first, then children in the order given.
    pub ids: Vec<ServerId>,
    /// Clamped raw shares before normalization.
    pub raw: Vec<f64>,
    pub beta: Vec<f64>,
    pub shares: Vec<f64>,
}

/// Clamped raw shares of a BCU for the time budget `budget`: host first, then children.
pub fn raw_shares(t_in: f64, host: &ServerState, host_rate: f64, children: &[(ServerId, f64)], budget: f64, gamma: f64) -> Vec<f64> {
    let cf = host.fwd_cost;
    let sigma = (host.q_rf + host.q_tf) * cf;
    let host_raw = (host_rate * (budget - cf * t_in - sigma) - host.q_proc) / (1.0 + gamma * cf * host_rate);
    std::iter::once(host_raw)
        .chain(children.iter().map(|&(_, r)| r * (budget - cf * host.q_rf) / (1.0 + gamma * r * cf)))
        .map(|x| x.max(0.0))
        .collect()
}

fn normalize(ids: Vec<ServerId>, raw: Vec<f64>, t_in: f64) -> Option<BcuSplit> {
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return None;
    }
    let beta: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    let shares = beta.iter().map(|b| b * t_in).collect();
    Some(BcuSplit { ids, raw, beta, shares })
}

/// Shares of `t_in` for a host and its children (`(id, rate)` pairs).
/// `None` when every raw share clamps to zero.
pub fn divide_bcu(
    t_in: f64,
    host: &ServerState,
    host_rate: f64,
    children: &[(ServerId, f64)],
    budget: f64,
    gamma: f64,
) -> Option<BcuSplit> {
    let raw = raw_shares(t_in, host, host_rate, children, budget, gamma);
    let ids = std::iter::once(host.id).chain(children.iter().map(|c| c.0)).collect();
    normalize(ids, raw, t_in)
}

/// Accumulated overhead has reached the equalized delay.
pub fn terminal_check(overhead: f64, d_m: f64) -> bool {
    overhead >= d_m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelExtremes {
    pub rf_min: f64,
    pub rf_max: f64,
    pub tf_min: f64,
    pub tf_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelBounds {
    pub lower: f64,
    /// `None` when the smallest per-level forwarding delay is zero.
    pub upper: Option<f64>,
}

impl LevelBounds {
    pub fn strictly_contains(&self, n: f64) -> bool {
        self.lower < n && self.upper.is_none_or(|u| n < u)
    }
}

pub fn level_bounds(e: &LevelExtremes, d_m: f64) -> LevelBounds {
    let hi = e.rf_max + e.tf_max;
    let lo = e.rf_min + e.tf_min;
    let lower = if hi > 0.0 { 1.0 + (d_m - e.mu_max) / hi } else { 1.0 };
    let upper = (lo > 0.0).then(|| 1.0 + (d_m - e.mu_min) / lo);
    LevelBounds { lower, upper }
}

impl Branch {
    /// Level at which the terminal condition fired, or the last level when it never did.
    pub fn terminating_level(&self) -> usize {
        self.levels_used + usize::from(self.probe.is_some())
    }

    /// Extremes over the realized path plus the pruned probe, if any.
    pub fn extremes(&self, plan: &DivisionPlan) -> LevelExtremes {
        let mut mus = Vec::new();
        let mut edges = Vec::new();
        for id in &self.path {
            let s = plan.share_of(*id).expect("branch server in plan");
            mus.push(s.mu);
            if s.level > 1 {
                edges.push((s.edge_rf, s.edge_tf));
            }
        }
        if let Some(p) = &self.probe {
            mus.push(p.mu);
            edges.push((p.edge_rf, p.edge_tf));
        }
        let fold = |xs: &mut dyn Iterator<Item = f64>| {
            xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
        };
        let (mu_min, mu_max) = fold(&mut mus.iter().copied());
        let (rf_min, rf_max) = if edges.is_empty() { (0.0, 0.0) } else { fold(&mut edges.iter().map(|e| e.0)) };
        let (tf_min, tf_max) = if edges.is_empty() { (0.0, 0.0) } else { fold(&mut edges.iter().map(|e| e.1)) };
        LevelExtremes { rf_min, rf_max, tf_min, tf_max, mu_min, mu_max }
    }
}

/// Equalizes the user's local delay with the home subtree's profile.
///
/// With a single zero-delay member of rate `c` this is [`split_user_server`].
pub fn split_user_profile(t: f64, f_m: f64, c_m_f: f64, home: &DelayProfile) -> OffloadDecision {
    let local = OffloadDecision { alpha: 1.0, offload_allowed: true, predicted_delay: t / f_m };
    // Seconds the user saves per offloaded bit.
    let k = 1.0 / f_m - c_m_f;
    let pts = home.points();
    let goal = t / f_m;
    if t <= 0.0 || k <= 0.0 || pts.is_empty() || pts[0].0 >= goal {
        return local;
    }
    // h(d) = d + k·x(d) − t/f_m rises from below zero.
    let h = |&(d, x): &(f64, f64)| d + k * x - goal;
    let d = match pts.iter().position(|p| h(p) >= 0.0) {
        Some(i) => {
            let (a, b) = (pts[i - 1], pts[i]);
            let (ha, hb) = (h(&a), h(&b));
            a.0 + (b.0 - a.0) * (-ha) / (hb - ha)
        }
        None => {
            let (dl, xl) = pts[pts.len() - 1];
            dl + (goal - dl - k * xl) / (1.0 + k * home.tail())
        }
    };
    let x = home.bits_at(d).min(t);
    if x >= t {
        let up = t * c_m_f;
        let servers = home.delay_for(t).unwrap_or(up);
        return OffloadDecision { alpha: 0.0, offload_allowed: true, predicted_delay: up.max(servers) };
    }
    let alpha = 1.0 - x / t;
    OffloadDecision { alpha, offload_allowed: true, predicted_delay: alpha * t / f_m + x * c_m_f }
}

struct Planner<'a> {
    forest: &'a CooperationForest,
    caps: &'a CapabilityTable,
    states: &'a [ServerState],
    p: &'a ModelParams,
    d_m: f64,
    shares: Vec<ServerShare>,
    branches: Vec<Branch>,
}

struct Arrival {
    node: ServerId,
    parent: Option<ServerId>,
    level: usize,
    received: f64,
    beta: f64,
    acc_rf: f64,
    acc_tf: f64,
    edge_rf: f64,
    edge_tf: f64,
}

impl Planner<'_> {
    fn descend(&mut self, a: Arrival, path: &mut Vec<ServerId>) {
        let st = &self.states[a.node];
        let kappa = self.p.kappa;
        let gamma = self.p.gamma;
        let kids = &self.forest.children[a.node];
        let (e0, _) = relay_edge(st, self.p);
        let probe_of = |c: ServerId, overhead: f64| {
            let (edge_rf, edge_tf) = (result_fwd_delay(st, 0.0, gamma), task_fwd_delay(st, 0.0));
            Probe { server: c, edge_rf, edge_tf, mu: mu(&self.states[c], kappa), overhead }
        };

        let mut probe = None;
        let mut pruned = false;
        let mut members = Vec::new();
        for &c in kids {
            let Some(start) = self.caps.profile[c].earliest() else { continue };
            let overhead = a.acc_rf + a.acc_tf + e0 + start;
            if terminal_check(overhead, self.d_m) {
                pruned = true;
                probe.get_or_insert(probe_of(c, overhead));
            } else {
                members.push(c);
            }
        }
        let announced: Vec<&DelayProfile> = members.iter().map(|&c| &self.caps.profile[c]).collect();
        let comps = bcu_components(st, &announced, self.p);
        let d_b = DelayProfile::sum(&comps).delay_for(a.received).unwrap_or(f64::INFINITY);
        let mut ids = vec![a.node];
        let mut raw = vec![comps[0].bits_at(d_b)];
        for (i, &c) in members.iter().enumerate() {
            let t = comps[i + 1].bits_at(d_b);
            if t > 0.0 {
                ids.push(c);
                raw.push(t);
            } else {
                pruned = true;
                let overhead = a.acc_rf + a.acc_tf + comps[i + 1].earliest().unwrap_or(f64::INFINITY);
                probe.get_or_insert(probe_of(c, overhead));
            }
        }
        let split = normalize(ids, raw, a.received);
        let (beta_own, next) = match &split {
            Some(s) => (s.beta[0], (1..s.ids.len()).map(|i| (s.ids[i], s.beta[i], s.shares[i])).collect()),
            None => (1.0, Vec::new()),
        };

        let bits = beta_own * a.received;
        let bcu_delay = processing_delay(st, bits, kappa) + result_fwd_delay(st, bits, gamma);
        self.shares.push(ServerShare {
            server: a.node,
            parent: a.parent,
            level: a.level,
            received: a.received,
            bits,
            beta: a.beta,
            beta_own,
            acc_rf: a.acc_rf,
            acc_tf: a.acc_tf,
            mu: mu(st, kappa),
            edge_rf: a.edge_rf,
            edge_tf: a.edge_tf,
            bcu_delay,
            predicted_delay: a.acc_rf + a.acc_tf + bcu_delay,
        });

        path.push(a.node);
        if next.is_empty() {
            self.branches.push(Branch { path: path.clone(), levels_used: a.level, terminated: pruned, probe });
        }
        // Earlier children's bits sit ahead in the task queue.
        let mut ahead = 0.0;
        for (c, beta, t) in next {
            let edge_rf = result_fwd_delay(st, t, gamma);
            let edge_tf = task_fwd_delay(st, ahead + t);
            ahead += t;
            self.descend(
                Arrival {
                    node: c,
                    parent: Some(a.node),
                    level: a.level + 1,
                    received: t,
                    beta,
                    acc_rf: a.acc_rf + edge_rf,
                    acc_tf: a.acc_tf + edge_tf,
                    edge_rf,
                    edge_tf,
                },
                path,
            );
        }
        path.pop();
    }
}

/// Plans one task of `t` bits against an epoch snapshot.
///
/// The home server builds its BCU from its current queues and its children's
/// announced profiles; every level below does the same with its own share.
pub fn plan_division(
    forest: &CooperationForest,
    caps: &CapabilityTable,
    states: &[ServerState],
    user: &MobileUser,
    t: f64,
    p: &ModelParams,
) -> Result<DivisionPlan, Error> {
    let home = user.home;
    if home >= states.len() || home >= forest.len() || home >= caps.profile.len() {
        return Err(Error::UnknownServer(home));
    }
    let f_m = user.rate(p.kappa);
    if !offload_gate(f_m, user.fwd_cost, caps.announced[home] / p.unit_delay) {
        let mut plan = DivisionPlan::local(t, t / f_m);
        plan.offload_allowed = false;
        return Ok(plan);
    }
    let kids: Vec<&DelayProfile> = forest.children[home].iter().map(|&c| &caps.profile[c]).collect();
    let dec = split_user_profile(t, f_m, user.fwd_cost, &DelayProfile::sum(&bcu_components(&states[home], &kids, p)));
    let offloaded = (1.0 - dec.alpha) * t;
    if offloaded <= 0.0 {
        return Ok(DivisionPlan::local(t, t / f_m));
    }

    let mut planner = Planner { forest, caps, states, p, d_m: dec.predicted_delay, shares: Vec::new(), branches: Vec::new() };
    planner.descend(
        Arrival {
            node: home,
            parent: None,
            level: 1,
            received: offloaded,
            beta: 1.0,
            acc_rf: 0.0,
            acc_tf: 0.0,
            edge_rf: 0.0,
            edge_tf: 0.0,
        },
        &mut Vec::new(),
    );
    Ok(DivisionPlan {
        total: t,
        alpha: dec.alpha,
        offload_allowed: true,
        predicted_delay: dec.predicted_delay,
        user_delay: dec.alpha * t / f_m + offloaded * user.fwd_cost,
        shares: planner.shares,
        branches: planner.branches,
    })
}

/// Relative spread `(max − min) / max` of the participants' end-to-end delays, user included when it keeps bits.
pub fn delay_spread(plan: &DivisionPlan) -> f64 {
    let mut ds: Vec<f64> = plan.shares.iter().filter(|s| s.bits > 0.0).map(|s| s.predicted_delay).collect();
    if plan.alpha > 0.0 {
        ds.push(plan.user_delay);
    }
    let max = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ds.iter().copied().fold(f64::INFINITY, f64::min);
    if ds.is_empty() || max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}
