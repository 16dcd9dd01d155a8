//! Centralized reference division and the empirical approximation ratio.
//!
//! The task is cut into `m` equal units. Every participant has an affine delay
//! `d(k) = base + k * per_unit` for `k` units, built from the same snapshot and
//! forwarding terms the decentralized planner sees. Under that model the
//! min-max allocation has a closed form, which [`exhaustive`] confirms on small
//! instances.

use std::collections::HashMap;

use crate::capacity::mu;
use crate::division::plan_division;
use crate::bcu::CooperationForest;
use crate::model::{CapabilityTable, DivisionPlan, MobileUser, ModelParams, ServerId, ServerState};
use crate::Error;

/// Largest `m * N` solved exactly under [`SolveMode::Auto`].
pub const EXACT_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitServer {
    /// `None` for the mobile user.
    pub id: Option<ServerId>,
    /// Delay with zero units, seconds.
    pub base: f64,
    /// Added delay per unit, seconds.
    pub per_unit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitInstance {
    pub servers: Vec<UnitServer>,
    pub m: usize,
    /// Bits per unit.
    pub unit: f64,
}

impl UnitInstance {
    /// `task` must be a whole number of `unit`s.
    pub fn new(servers: Vec<UnitServer>, task: f64, unit: f64) -> Result<Self, Error> {
        if servers.is_empty() {
            return Err(Error::NoCandidates);
        }
        if !(unit > 0.0) || task < 0.0 {
            return Err(Error::Config(format!("task {task} with unit {unit}")));
        }
        let m = (task / unit).round();
        if (m * unit - task).abs() > 1e-9 * task.max(1.0) {
            return Err(Error::Config(format!("task {task} is not a multiple of unit {unit}")));
        }
        Ok(Self { servers, m: m as usize, unit })
    }

    pub fn delay(&self, i: usize, k: usize) -> f64 {
        let s = &self.servers[i];
        s.base + k as f64 * s.per_unit
    }

    pub fn max_delay(&self, alloc: &[usize]) -> f64 {
        alloc.iter().enumerate().map(|(i, &k)| self.delay(i, k)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Most units server `i` can take without exceeding `d`.
    fn capacity(&self, i: usize, d: f64) -> usize {
        let mut k = 0;
        while k < self.m && self.delay(i, k + 1) <= d {
            k += 1;
        }
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolveMode {
    /// Exact when `m * N <= EXACT_LIMIT`, otherwise local search.
    #[default]
    Auto,
    Exact,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub alloc: Vec<usize>,
    pub d_star: f64,
    pub exact: bool,
}

/// Min-max unit allocation. Exact mode returns the lexicographically smallest optimum.
pub fn solve_optimal(inst: &UnitInstance, mode: SolveMode) -> Solution {
    let exact = match mode {
        SolveMode::Exact => true,
        SolveMode::Local => false,
        SolveMode::Auto => inst.m.saturating_mul(inst.servers.len()) <= EXACT_LIMIT,
    };
    if exact {
        solve_exact(inst)
    } else {
        solve_local(inst)
    }
}

fn solve_exact(inst: &UnitInstance) -> Solution {
    let n = inst.servers.len();
    let floor = (0..n).map(|i| inst.delay(i, 0)).fold(f64::NEG_INFINITY, f64::max);
    let mut d_star = floor;
    if inst.m > 0 {
        // The m-th cheapest unit slot over all servers sets the makespan.
        let mut slots: Vec<f64> = (0..n).flat_map(|i| (1..=inst.m).map(move |k| (i, k))).map(|(i, k)| inst.delay(i, k)).collect();
        let (_, kth, _) = slots.select_nth_unstable_by(inst.m - 1, f64::total_cmp);
        d_star = d_star.max(*kth);
    }
    let caps: Vec<usize> = (0..n).map(|i| inst.capacity(i, d_star)).collect();
    let mut suffix = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + caps[i];
    }
    let mut rem = inst.m;
    let mut alloc = vec![0; n];
    for i in 0..n {
        alloc[i] = rem.saturating_sub(suffix[i + 1]);
        rem -= alloc[i];
    }
    debug_assert_eq!(rem, 0);
    Solution { d_star: inst.max_delay(&alloc), alloc, exact: true }
}

fn solve_local(inst: &UnitInstance) -> Solution {
    let n = inst.servers.len();
    let mut alloc = vec![0usize; n];
    for _ in 0..inst.m {
        let best = (0..n).min_by(|&a, &b| inst.delay(a, alloc[a] + 1).total_cmp(&inst.delay(b, alloc[b] + 1))).unwrap();
        alloc[best] += 1;
    }
    // Move single units off the bottleneck while that strictly lowers the maximum.
    loop {
        let current = inst.max_delay(&alloc);
        let worst = (0..n).filter(|&i| alloc[i] > 0).max_by(|&a, &b| {
            inst.delay(a, alloc[a]).total_cmp(&inst.delay(b, alloc[b])).then(b.cmp(&a))
        });
        let Some(w) = worst else { break };
        let mut improved = false;
        for j in 0..n {
            if j == w {
                continue;
            }
            let mut trial = alloc.clone();
            trial[w] -= 1;
            trial[j] += 1;
            if inst.max_delay(&trial) < current {
                alloc = trial;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }
    Solution { d_star: inst.max_delay(&alloc), alloc, exact: false }
}

/// Brute force over every composition of `m`; first minimum in lexicographic order wins.
pub fn exhaustive(inst: &UnitInstance) -> Solution {
    let n = inst.servers.len();
    let mut alloc = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    fn rec(inst: &UnitInstance, i: usize, rem: usize, alloc: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if i + 1 == alloc.len() {
            alloc[i] = rem;
            let d = inst.max_delay(alloc);
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                *best = Some((d, alloc.clone()));
            }
            return;
        }
        for k in 0..=rem {
            alloc[i] = k;
            rec(inst, i + 1, rem - k, alloc, best);
        }
    }
    rec(inst, 0, inst.m, &mut alloc, &mut best);
    let (d_star, alloc) = best.expect("at least one composition");
    Solution { alloc, d_star, exact: true }
}

/// Whole-unit counts summing to `m`, proportional to `weights` (largest remainder, ties to lower index).
pub fn quantize(weights: &[f64], m: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.is_empty() {
        let mut out = vec![0; weights.len()];
        if let Some(first) = out.first_mut() {
            *first = m;
        }
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * m as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let short = m - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Participants of `plan` (user first, then servers that process bits) as an affine instance,
/// together with the plan's own allocation rounded to units.
pub fn instance_from_plan(
    plan: &DivisionPlan,
    states: &[ServerState],
    user: &MobileUser,
    p: &ModelParams,
    units: usize,
) -> Result<(UnitInstance, Vec<usize>), Error> {
    if units == 0 {
        return Err(Error::Config("units must be positive".into()));
    }
    let unit = plan.total / units as f64;
    let parent: HashMap<ServerId, Option<ServerId>> = plan.shares.iter().map(|s| (s.server, s.parent)).collect();
    let uplink = unit * user.fwd_cost;

    let mut servers = vec![UnitServer { id: None, base: 0.0, per_unit: unit / user.rate(p.kappa) }];
    let mut weights = vec![plan.alpha * plan.total];
    for s in plan.shares.iter().filter(|s| s.bits > 0.0) {
        let st = &states[s.server];
        let mut base = mu(st, p.kappa) + st.q_rf * st.fwd_cost;
        let mut per_unit = unit / st.rate(p.kappa) + p.gamma * unit * st.fwd_cost + uplink;
        let mut up = parent[&s.server];
        while let Some(a) = up {
            let sa = &states[a];
            base += (sa.q_tf + sa.q_rf) * sa.fwd_cost;
            per_unit += (1.0 + p.gamma) * unit * sa.fwd_cost;
            up = parent[&a];
        }
        servers.push(UnitServer { id: Some(s.server), base, per_unit });
        weights.push(s.bits);
    }
    let inst = UnitInstance::new(servers, plan.total, unit)?;
    let alloc = quantize(&weights, inst.m);
    Ok((inst, alloc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioReport {
    /// Decentralized plan evaluated under the unit model.
    pub d_m: f64,
    pub d_star: f64,
    /// `None` when `d_star` is zero.
    pub delta: Option<f64>,
    pub bound_lo: f64,
    /// `None` when the smallest delay term is zero.
    pub bound_hi: Option<f64>,
    pub exact: bool,
    /// The planner's own equalized delay.
    pub predicted: f64,
}

impl RatioReport {
    pub const CSV_HEADER: &'static str = "delta,d_m,d_star,bound_lo,bound_hi,exact";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "inf".to_string(), |v| v.to_string());
        format!("{},{},{},{},{},{}", opt(self.delta), self.d_m, self.d_star, self.bound_lo, opt(self.bound_hi), self.exact)
    }
}

/// Extremes of the per-server `μ` and per-edge forwarding delays over the plan's participants.
pub fn delay_extremes(plan: &DivisionPlan) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in plan.shares.iter().filter(|s| s.bits > 0.0) {
        let mut terms = vec![s.mu];
        if s.level > 1 {
            terms.extend([s.edge_rf, s.edge_tf]);
        }
        for x in terms {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo, hi)
}

/// Plans `t` bits, solves the same participant set centrally and compares.
pub fn measure_ratio(
    forest: &CooperationForest,
    caps: &CapabilityTable,
    states: &[ServerState],
    user: &MobileUser,
    t: f64,
    p: &ModelParams,
    units: usize,
    mode: SolveMode,
) -> Result<RatioReport, Error> {
    let plan = plan_division(forest, caps, states, user, t, p)?;
    let (inst, alloc) = instance_from_plan(&plan, states, user, p, units)?;
    let d_m = inst.max_delay(&alloc);
    let sol = solve_optimal(&inst, mode);
    let (lo, hi) = delay_extremes(&plan);
    let (bound_lo, bound_hi) = if hi.is_finite() && hi > 0.0 {
        (lo / hi, (lo > 0.0).then(|| hi / lo))
    } else {
        (1.0, Some(1.0))
    };
    Ok(RatioReport {
        d_m,
        d_star: sol.d_star,
        delta: (sol.d_star > 0.0).then(|| d_m / sol.d_star),
        bound_lo,
        bound_hi,
        exact: sol.exact,
        predicted: plan.predicted_delay,
    })
}

/// `1 <= Δ <= D_max / D_min` with a little slack; needs an exact `D*`.
pub fn bound_check(r: &RatioReport) -> bool {
    const SLACK: f64 = 1e-9;
    match r.delta {
        Some(d) if r.exact => d >= 1.0 - SLACK && r.bound_hi.is_none_or(|hi| d <= hi * (1.0 + SLACK)),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn srv(base: f64, per_unit: f64) -> UnitServer {
        UnitServer { id: None, base, per_unit }
    }

    #[test]
    fn equal_servers_split_evenly() {
        let inst = UnitInstance::new(vec![srv(0.0, 1.0), srv(0.0, 1.0)], 10.0, 1.0).unwrap();
        let sol = solve_optimal(&inst, SolveMode::Exact);
        assert_eq!(sol.alloc, vec![5, 5]);
        assert_eq!(sol.d_star, 5.0);
    }

    #[test]
    fn speeds_one_to_three() {
        let inst = UnitInstance::new(vec![srv(0.0, 1.0), srv(0.0, 1.0 / 3.0)], 8.0, 1.0).unwrap();
        let sol = solve_optimal(&inst, SolveMode::Exact);
        assert_eq!(sol.alloc, vec![2, 6]);
        assert_eq!(sol, exhaustive(&inst));
    }

    #[test]
    fn crafted_queues_match_brute_force() {
        let inst = UnitInstance::new(vec![srv(0.5, 1.0), srv(2.0, 0.5), srv(0.0, 2.0)], 6.0, 1.0).unwrap();
        assert_eq!(solve_optimal(&inst, SolveMode::Exact), exhaustive(&inst));
    }

    #[test]
    fn empty_task_reports_queues() {
        let inst = UnitInstance::new(vec![srv(0.3, 1.0), srv(0.7, 1.0)], 0.0, 1.0).unwrap();
        let sol = solve_optimal(&inst, SolveMode::Exact);
        assert_eq!(sol.alloc, vec![0, 0]);
        assert_eq!(sol.d_star, 0.7);
    }

    #[test]
    fn local_mode_reaches_the_optimum_value() {
        let inst = UnitInstance::new(vec![srv(0.1, 0.3), srv(0.0, 0.7), srv(0.4, 0.2)], 40.0, 1.0).unwrap();
        let local = solve_optimal(&inst, SolveMode::Local);
        assert!(!local.exact);
        assert_eq!(local.alloc.iter().sum::<usize>(), 40);
        assert_eq!(local.d_star, solve_optimal(&inst, SolveMode::Exact).d_star);
    }

    #[test]
    fn non_multiple_task_is_rejected() {
        assert!(UnitInstance::new(vec![srv(0.0, 1.0)], 10.5, 1.0).is_err());
        assert!(UnitInstance::new(vec![], 1.0, 1.0).is_err());
    }

    #[test]
    fn quantization_sums() {
        assert_eq!(quantize(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(quantize(&[0.0, 0.0], 5), vec![5, 0]);
        assert_eq!(quantize(&[2.0, 6.0], 8), vec![2, 6]);
    }

    fn report(delta: Option<f64>, hi: Option<f64>, exact: bool) -> RatioReport {
        RatioReport { d_m: 1.0, d_star: 1.0, delta, bound_lo: 0.5, bound_hi: hi, exact, predicted: 1.0 }
    }

    #[test]
    fn bound_checks() {
        assert!(bound_check(&report(Some(1.0), Some(2.0), true)));
        assert!(bound_check(&report(Some(2.0), Some(2.0), true)));
        assert!(!bound_check(&report(Some(2.5), Some(2.0), true)));
        assert!(!bound_check(&report(Some(0.9), Some(2.0), true)));
        assert!(!bound_check(&report(Some(1.0), Some(2.0), false)));
        assert!(bound_check(&report(Some(7.0), None, true)));
        assert_eq!(report(None, None, true).csv_row(), "inf,1,1,0.5,inf,true");
    }
}
