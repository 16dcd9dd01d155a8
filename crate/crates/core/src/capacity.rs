//! Delay model and announced capabilities.
//!
//! A server announces `c = Cd_own + Σ Cd_child`, computed leaves first. The
//! host term is what the server itself can finish within one unit delay after
//! its queues; each child term is the child's announcement discounted by the
//! time spent relaying through this server.

use crate::bcu::CooperationForest;
use crate::model::{AnnounceLoad, CapabilityTable, ModelParams, ServerId, ServerState};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DelayBreakdown {
    pub processing: f64,
    pub task_fwd: f64,
    pub result_fwd: f64,
}

impl DelayBreakdown {
    pub fn total(&self) -> f64 {
        self.processing + self.task_fwd + self.result_fwd
    }
}

pub fn processing_delay(s: &ServerState, l: f64, kappa: f64) -> f64 {
    (s.q_proc + l) * kappa / s.cpu_hz
}

pub fn task_fwd_delay(s: &ServerState, l: f64) -> f64 {
    (s.q_tf + l) * s.fwd_cost
}

pub fn result_fwd_delay(s: &ServerState, l: f64, gamma: f64) -> f64 {
    (s.q_rf + gamma * l) * s.fwd_cost
}

/// Queueing delay of the processing backlog, `μ = q_s·κ/f_s`.
pub fn mu(s: &ServerState, kappa: f64) -> f64 {
    processing_delay(s, 0.0, kappa)
}

/// Forwarding delays charged against one unit delay, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForwardingContext {
    pub task_fwd: f64,
    pub result_fwd: f64,
}

impl ForwardingContext {
    /// Backlog-only terms of `s`'s own queues.
    pub fn backlog(s: &ServerState) -> Self {
        Self { task_fwd: task_fwd_delay(s, 0.0), result_fwd: result_fwd_delay(s, 0.0, 0.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    /// The server's own processing.
    Host,
    /// A cooperating subtree that announced `announced` bits per unit delay.
    Child { announced: f64 },
}

/// Bits finishable within one unit delay, clamped at zero.
pub fn unit_delay_capability(s: &ServerState, role: Role, ctx: ForwardingContext, p: &ModelParams) -> f64 {
    let du = p.unit_delay;
    let cd = match role {
        Role::Host => s.rate(p.kappa) * (du - ctx.task_fwd - ctx.result_fwd) - s.q_proc,
        Role::Child { announced } => announced / du * (du - ctx.result_fwd),
    };
    cd.max(0.0)
}

/// Forwarding-delay degree of each member of `host`'s BCU, host first.
pub fn k_parameters(states: &[ServerState], host: ServerId, children: &[ServerId], p: &ModelParams) -> Vec<(ServerId, f64)> {
    let h = &states[host];
    let ctx = ForwardingContext::backlog(h);
    let k_host = (ctx.result_fwd + ctx.task_fwd + mu(h, p.kappa)) / p.unit_delay;
    let k_child = ctx.result_fwd / p.unit_delay;
    std::iter::once((host, k_host)).chain(children.iter().map(|&c| (c, k_child))).collect()
}

/// One announcement pass over `forest`, leaves first.
pub fn announce_round(
    forest: &CooperationForest,
    states: &[ServerState],
    prev_round: u64,
    p: &ModelParams,
) -> Result<CapabilityTable, Error> {
    let order = forest.leaves_first()?;
    let n = states.len();
    let mut announced = vec![0.0; n];
    let mut own = vec![0.0; n];
    let mut contribution = vec![0.0; n];
    let mut k = vec![0.0; n];

    for s in order {
        let st = &states[s];
        let ctx = ForwardingContext::backlog(st);
        own[s] = match p.announce_load {
            AnnounceLoad::QueueOnly => unit_delay_capability(st, Role::Host, ctx, p),
            AnnounceLoad::UnitDelay => {
                // The host's own results ride its result queue.
                let r = st.rate(p.kappa);
                let cd = (r * (p.unit_delay - ctx.task_fwd - ctx.result_fwd) - st.q_proc)
                    / (1.0 + p.gamma * r * st.fwd_cost);
                cd.max(0.0)
            }
        };
        k[s] = (ctx.task_fwd + ctx.result_fwd + mu(st, p.kappa)) / p.unit_delay;
        let mut total = own[s];
        let kids = &forest.children[s];
        match p.announce_load {
            AnnounceLoad::QueueOnly => {
                for &c in kids {
                    contribution[c] =
                        unit_delay_capability(&states[c], Role::Child { announced: announced[c] }, ctx, p);
                }
            }
            AnnounceLoad::UnitDelay => {
                // All children's bits share this server's task queue, so the
                // subtrees act as one pipe of rate `rk` behind it.
                let rk: f64 = kids.iter().map(|&c| announced[c]).sum::<f64>() / p.unit_delay;
                if rk > 0.0 {
                    let pipe = (rk * (p.unit_delay - ctx.task_fwd) / (1.0 + rk * st.fwd_cost)).max(0.0);
                    for &c in kids {
                        contribution[c] = pipe * announced[c] / (rk * p.unit_delay);
                    }
                } else {
                    for &c in kids {
                        contribution[c] = 0.0;
                    }
                }
            }
        }
        total += kids.iter().map(|&c| contribution[c]).sum::<f64>();
        announced[s] = total;
        if forest.parent[s].is_none() {
            contribution[s] = total;
        }
    }
    let profile = subtree_profiles(forest, states, p)?;
    Ok(CapabilityTable { round: prev_round + 1, announced, unit_delay: own, contribution, k, profile })
}

/// Bits a subtree can finish by each delay: zero up to the first point,
/// linear between points, then growing at `tail` bits per second.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayProfile {
    /// `(d, x)` with both coordinates nondecreasing; the first has `x = 0`.
    pts: Vec<(f64, f64)>,
    tail: f64,
}

impl DelayProfile {
    /// A member that starts finishing bits at `a` and then finishes `w` per second.
    pub fn hinge(a: f64, w: f64) -> Self {
        if w > 0.0 && w.is_finite() && a.is_finite() {
            Self { pts: vec![(a, 0.0)], tail: w }
        } else {
            Self::default()
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.pts
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Smallest delay at which any bit completes.
    pub fn earliest(&self) -> Option<f64> {
        self.pts.first().map(|p| p.0)
    }

    pub fn bits_at(&self, d: f64) -> f64 {
        let Some(&(d0, _)) = self.pts.first() else { return 0.0 };
        if d <= d0 {
            return 0.0;
        }
        let i = self.pts.partition_point(|p| p.0 <= d);
        let (da, xa) = self.pts[i - 1];
        match self.pts.get(i) {
            Some(&(db, xb)) => xa + (xb - xa) * (d - da) / (db - da),
            None => xa + self.tail * (d - da),
        }
    }

    /// Smallest delay finishing `x` bits.
    pub fn delay_for(&self, x: f64) -> Option<f64> {
        let &(d0, _) = self.pts.first()?;
        if x <= 0.0 {
            return Some(d0);
        }
        let i = self.pts.partition_point(|p| p.1 < x);
        if i < self.pts.len() {
            let (db, xb) = self.pts[i];
            let (da, xa) = self.pts[i - 1];
            return Some(da + (db - da) * (x - xa) / (xb - xa));
        }
        let (dl, xl) = *self.pts.last()?;
        (self.tail > 0.0).then(|| dl + (x - xl) / self.tail)
    }

    /// The profile seen across a link adding `e0 + e1·t` to `t` bits.
    pub fn through_edge(&self, e0: f64, e1: f64) -> Self {
        Self {
            pts: self.pts.iter().map(|&(d, x)| (d + e0 + e1 * x, x)).collect(),
            tail: self.tail / (1.0 + e1 * self.tail),
        }
    }

    /// This profile queued behind `ahead` on a pipe costing `c` seconds per
    /// bit: by delay `d` the pipe has spent `c·ahead(d)` on the earlier bits.
    pub fn behind(&self, ahead: &DelayProfile, c: f64) -> Self {
        if self.is_empty() || ahead.is_empty() || c == 0.0 {
            return self.clone();
        }
        let g = |d: f64| d - c * ahead.bits_at(d);
        // g is increasing as long as the pipe keeps up, so it has an inverse.
        let g_pts: Vec<(f64, f64)> = ahead.pts.iter().map(|&(d, _)| (g(d), d)).collect();
        let g_slope = 1.0 - c * ahead.tail;
        let g_inv = |y: f64| {
            let i = g_pts.partition_point(|p| p.0 <= y);
            if i == 0 {
                // Before `ahead` starts, nothing is in front.
                return y;
            }
            let (ya, da) = g_pts[i - 1];
            match g_pts.get(i) {
                Some(&(yb, db)) => da + (db - da) * (y - ya) / (yb - ya),
                None => da + (y - ya) / g_slope,
            }
        };
        let d0 = g_inv(self.pts[0].0);
        let mut ds: Vec<f64> = self.pts.iter().map(|p| g_inv(p.0)).collect();
        ds.extend(ahead.pts.iter().map(|p| p.0).filter(|&d| d > d0));
        ds.sort_by(f64::total_cmp);
        ds.dedup();
        let pts = ds.into_iter().map(|d| (d, self.bits_at(g(d)))).collect();
        Self { pts, tail: self.tail * g_slope }
    }

    pub fn sum<'p>(parts: impl IntoIterator<Item = &'p DelayProfile>) -> Self {
        let parts: Vec<&DelayProfile> = parts.into_iter().filter(|p| !p.is_empty()).collect();
        let mut ds: Vec<f64> = parts.iter().flat_map(|p| p.pts.iter().map(|q| q.0)).collect();
        ds.sort_by(f64::total_cmp);
        ds.dedup();
        let pts = ds.into_iter().map(|d| (d, parts.iter().map(|p| p.bits_at(d)).sum())).collect();
        Self { pts, tail: parts.iter().map(|p| p.tail).sum() }
    }
}

/// Fixed and per-bit delay `host` adds to bits it relays to a child and back.
pub fn relay_edge(host: &ServerState, p: &ModelParams) -> (f64, f64) {
    let cf = host.fwd_cost;
    (cf * (host.q_tf + host.q_rf), cf * (1.0 + p.gamma))
}

/// A BCU's members as profiles seen from `host`: its own processing first,
/// then each child's subtree behind the host's forwarding queues. Children
/// share the task queue in the order given, each waiting for the ones before.
pub fn bcu_components(host: &ServerState, children: &[&DelayProfile], p: &ModelParams) -> Vec<DelayProfile> {
    let r = host.rate(p.kappa);
    let cf = host.fwd_cost;
    let mut out = vec![DelayProfile::hinge(mu(host, p.kappa) + cf * host.q_rf, r / (1.0 + p.gamma * r * cf))];
    let (e0, e1) = relay_edge(host, p);
    let mut ahead = DelayProfile::default();
    for c in children {
        let comp = c.through_edge(e0, e1).behind(&ahead, cf);
        ahead = DelayProfile::sum([&ahead, &comp]);
        out.push(comp);
    }
    out
}

/// Every server's subtree profile, leaves first.
pub fn subtree_profiles(forest: &CooperationForest, states: &[ServerState], p: &ModelParams) -> Result<Vec<DelayProfile>, Error> {
    let mut out = vec![DelayProfile::default(); states.len()];
    for s in forest.leaves_first()? {
        let kids: Vec<&DelayProfile> = forest.children[s].iter().map(|&c| &out[c]).collect();
        let parts = bcu_components(&states[s], &kids, p);
        out[s] = DelayProfile::sum(&parts);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SimConfig;

    fn params(load: AnnounceLoad) -> ModelParams {
        ModelParams { announce_load: load, ..SimConfig::default().params() }
    }

    fn srv(id: usize, hz: f64, fwd_cost: f64) -> ServerState {
        ServerState::idle(id, hz, 1e10, fwd_cost, vec![])
    }

    #[test]
    fn delay_arithmetic() {
        let mut s = srv(0, 8e9, 1e-7);
        assert_eq!(processing_delay(&s, 0.0, 500.0), 0.0);
        assert!((processing_delay(&s, 8e6, 500.0) - 0.5).abs() < 1e-12);
        s.q_proc = 8e6;
        assert!((processing_delay(&s, 8e6, 500.0) - 1.0).abs() < 1e-12);
        s.q_tf = 1e6;
        assert!((task_fwd_delay(&s, 1e6) - 0.2).abs() < 1e-12);
        assert!((result_fwd_delay(&s, 1e6, 0.2) - 0.02).abs() < 1e-12);
        assert_eq!(result_fwd_delay(&srv(0, 1.0, 1e-7), 0.0, 0.2), 0.0);
        assert_eq!(task_fwd_delay(&srv(0, 1.0, 0.0), 5e6), 0.0);
    }

    #[test]
    fn unit_delay_capability_forms() {
        let p = ModelParams { kappa: 1.0, gamma: 0.2, unit_delay: 1.0, announce_load: AnnounceLoad::QueueOnly };
        let leaf = srv(0, 10.0, 0.0);
        let zero = ForwardingContext::default();
        assert_eq!(unit_delay_capability(&leaf, Role::Host, zero, &p), 10.0);
        assert_eq!(unit_delay_capability(&leaf, Role::Child { announced: 10.0 }, zero, &p), 10.0);
        let ctx = ForwardingContext { task_fwd: 0.0, result_fwd: 0.3 };
        assert!((unit_delay_capability(&leaf, Role::Child { announced: 10.0 }, ctx, &p) - 7.0).abs() < 1e-12);
        let swamped = ForwardingContext { task_fwd: 0.6, result_fwd: 0.4 };
        assert_eq!(unit_delay_capability(&leaf, Role::Host, swamped, &p), 0.0);
    }

    #[test]
    fn k_values() {
        let p = ModelParams { kappa: 1.0, gamma: 0.2, unit_delay: 1.0, announce_load: AnnounceLoad::QueueOnly };
        let states = vec![srv(0, 10.0, 0.0), srv(1, 10.0, 0.0)];
        assert_eq!(k_parameters(&states, 0, &[1], &p), vec![(0, 0.0), (1, 0.0)]);
        let mut h = srv(0, 10.0, 0.1);
        h.q_rf = 3.0;
        let states = vec![h, srv(1, 10.0, 0.0)];
        let k = k_parameters(&states, 0, &[1], &p);
        assert!((k[1].1 - 0.3).abs() < 1e-12);
        let ctx = ForwardingContext::backlog(&states[0]);
        let cd = unit_delay_capability(&states[1], Role::Child { announced: 10.0 }, ctx, &p);
        assert!((cd - 10.0 * (1.0 - k[1].1)).abs() < 1e-12);
    }

    #[test]
    fn k_of_one_means_nothing_fits() {
        let p = ModelParams { kappa: 1.0, gamma: 0.2, unit_delay: 1.0, announce_load: AnnounceLoad::QueueOnly };
        let mut h = srv(0, 10.0, 0.1);
        h.q_tf = 4.0;
        h.q_rf = 1.0;
        h.q_proc = 5.0;
        let k = k_parameters(&[h.clone()], 0, &[], &p)[0].1;
        assert!((k - 1.0).abs() < 1e-12);
        assert_eq!(unit_delay_capability(&h, Role::Host, ForwardingContext::backlog(&h), &p), 0.0);
    }

    #[test]
    fn leaf_and_host_sum() {
        for load in [AnnounceLoad::QueueOnly, AnnounceLoad::UnitDelay] {
            let p = ModelParams { kappa: 1.0, gamma: 0.2, unit_delay: 1.0, announce_load: load };
            let states = vec![srv(0, 20.0, 0.0), srv(1, 10.0, 0.0)];
            let f = CooperationForest::from_parents(vec![None, Some(0)]);
            let t = announce_round(&f, &states, 0, &p).unwrap();
            assert_eq!(t.round, 1);
            assert_eq!(t.announced, vec![30.0, 10.0]);
        }
    }

    #[test]
    fn chain_telescopes() {
        let p = params(AnnounceLoad::QueueOnly);
        let states = vec![srv(0, 1e9, 0.0), srv(1, 2e9, 0.0), srv(2, 3e9, 0.0)];
        let f = CooperationForest::from_parents(vec![None, Some(0), Some(1)]);
        let t = announce_round(&f, &states, 4, &p).unwrap();
        let r = |hz: f64| hz / p.kappa * p.unit_delay;
        assert!((t.announced[0] - r(6e9)).abs() < 1e-6);
        assert!((t.announced[1] - r(5e9)).abs() < 1e-6);
        assert_eq!(t.round, 5);
    }

    #[test]
    fn profile_arithmetic() {
        let p = DelayProfile::sum(&[DelayProfile::hinge(1.0, 2.0), DelayProfile::hinge(0.0, 1.0)]);
        assert_eq!(p.earliest(), Some(0.0));
        assert_eq!(p.bits_at(0.5), 0.5);
        assert_eq!(p.bits_at(3.0), 3.0 + 4.0);
        assert_eq!(p.delay_for(7.0), Some(3.0));
        assert_eq!(p.delay_for(0.0), Some(0.0));
        assert!(DelayProfile::hinge(0.0, 0.0).is_empty());
        assert_eq!(DelayProfile::default().delay_for(1.0), None);
    }

    #[test]
    fn edge_adds_its_delay_to_every_bit() {
        // Behind an edge costing 0.5 + 0.25·t, a 4 bit/s member at 1.0 finishes t bits by 1.5 + 0.5·t.
        let e = DelayProfile::hinge(1.0, 4.0).through_edge(0.5, 0.25);
        assert_eq!((e.points(), e.tail()), (&[(1.5, 0.0)][..], 2.0));
        let two = DelayProfile::sum(&[DelayProfile::hinge(0.0, 1.0), DelayProfile::hinge(1.0, 1.0)]).through_edge(0.0, 1.0);
        // One bit is done at d = 1 before the second member starts, so it appears at 1 + 1·1.
        assert_eq!(two.points()[1], (2.0, 1.0));
        let x = 3.0;
        let d = two.delay_for(x).unwrap();
        let inner = DelayProfile::sum(&[DelayProfile::hinge(0.0, 1.0), DelayProfile::hinge(1.0, 1.0)]);
        assert!((d - (inner.delay_for(x).unwrap() + x)).abs() < 1e-12);
    }

    #[test]
    fn queued_profile_waits_for_the_bits_ahead() {
        // The pipe costs 0.5 s/bit and already carries 2 bits/s from t = 0, so it is
        // busy until its backlog clears; a hinge at 1 then shifts by 0.5·ahead(d).
        let ahead = DelayProfile::hinge(0.0, 1.0);
        let me = DelayProfile::hinge(1.0, 1.0).behind(&ahead, 0.5);
        for d in [0.5f64, 2.0, 3.0, 7.5] {
            let want = (d - 0.5 * d - 1.0).max(0.0);
            assert!((me.bits_at(d) - want).abs() < 1e-12, "d={d}");
        }
        assert_eq!(me.earliest(), Some(2.0));
        assert_eq!(DelayProfile::hinge(1.0, 1.0).behind(&DelayProfile::default(), 0.5), DelayProfile::hinge(1.0, 1.0));
    }

    #[test]
    fn cyclic_forest_is_rejected() {
        let p = params(AnnounceLoad::QueueOnly);
        let states = vec![srv(0, 1e9, 0.0), srv(1, 1e9, 0.0)];
        let f = CooperationForest::from_parents(vec![Some(1), Some(0)]);
        assert!(announce_round(&f, &states, 0, &p).is_err());
    }
}
