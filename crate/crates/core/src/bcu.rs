//! Loop-free cooperation forest.
//!
//! Every server picks at most one host among its neighbors. A server never
//! attaches to one of its own descendants (its CSM), which is exactly the
//! condition that would close a loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::{OrderPolicy, ServerId, ServerState};
use crate::selection::{select_host, CandidateMatrix};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct CooperationForest {
    pub parent: Vec<Option<ServerId>>,
    /// Sorted ascending.
    pub children: Vec<Vec<ServerId>>,
    /// Transitive descendants of each server.
    pub csm: Vec<BTreeSet<ServerId>>,
    /// Order in which servers chose their hosts.
    pub order: Vec<ServerId>,
}

/// A host together with its direct cooperation servers.
#[derive(Debug, Clone, PartialEq)]
pub struct Bcu {
    pub host: ServerId,
    pub children: Vec<ServerId>,
}

pub fn processing_order<R: Rng>(n: usize, policy: OrderPolicy, rng: &mut R) -> Vec<ServerId> {
    let mut order: Vec<ServerId> = (0..n).collect();
    if policy == OrderPolicy::Random {
        order.shuffle(rng);
    }
    order
}

pub fn conflict_check(candidates: &[ServerId], csm: &BTreeSet<ServerId>) -> Vec<ServerId> {
    candidates.iter().copied().filter(|c| !csm.contains(c)).collect()
}

/// Greedy construction. Servers in `anchors` only ever act as hosts.
pub fn build_forest(states: &[ServerState], order: &[ServerId], anchors: &[ServerId], kappa: f64) -> CooperationForest {
    let seq: Vec<ServerId> = order.iter().copied().filter(|s| !anchors.contains(s)).collect();
    grow(states, order, &seq, |s| states[s].neighbors.clone(), kappa)
}

/// Tree grown outward from `root`: a server at hop distance `d` picks its host
/// among neighbors at distance `d - 1`. Servers are visited by distance, ties
/// in `order`. Servers outside `root`'s component stay detached.
pub fn build_layered_forest(states: &[ServerState], order: &[ServerId], root: ServerId, kappa: f64) -> CooperationForest {
    let n = states.len();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([root]);
    dist[root] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in &states[u].neighbors {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut seq: Vec<ServerId> = order.iter().copied().filter(|&s| s != root && dist[s] != usize::MAX).collect();
    seq.sort_by_key(|&s| dist[s]);
    grow(
        states,
        order,
        &seq,
        |s| states[s].neighbors.iter().copied().filter(|&c| dist[c] + 1 == dist[s]).collect(),
        kappa,
    )
}

fn grow(
    states: &[ServerState],
    order: &[ServerId],
    seq: &[ServerId],
    candidates: impl Fn(ServerId) -> Vec<ServerId>,
    kappa: f64,
) -> CooperationForest {
    let n = states.len();
    let mut parent = vec![None; n];
    let mut children: Vec<Vec<ServerId>> = vec![Vec::new(); n];
    let mut csm: Vec<BTreeSet<ServerId>> = vec![BTreeSet::new(); n];

    for &s in seq {
        let legal = conflict_check(&candidates(s), &csm[s]);
        if legal.is_empty() {
            continue;
        }
        let matrix = CandidateMatrix::from_states(legal.iter().map(|&c| &states[c]), kappa);
        let host = select_host(&matrix).expect("non-empty candidates");
        parent[s] = Some(host);
        children[host].push(s);

        let mut moved = csm[s].clone();
        moved.insert(s);
        let mut a = Some(host);
        while let Some(x) = a {
            csm[x].extend(moved.iter().copied());
            a = parent[x];
        }
    }
    for c in &mut children {
        c.sort_unstable();
    }
    CooperationForest { parent, children, csm, order: order.to_vec() }
}

impl CooperationForest {
    /// Forest from an explicit parent map. No invariants are checked here; see [`Self::validate`].
    pub fn from_parents(parent: Vec<Option<ServerId>>) -> Self {
        let n = parent.len();
        let mut children = vec![Vec::new(); n];
        for (s, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(s);
            }
        }
        let mut f = CooperationForest { parent, children, csm: vec![BTreeSet::new(); n], order: (0..n).collect() };
        f.csm = f.descendant_sets();
        f
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn roots(&self) -> impl Iterator<Item = ServerId> + '_ {
        (0..self.len()).filter(|&s| self.parent[s].is_none())
    }

    /// Descendant sets recomputed from `children`; stops at revisits so it terminates on cyclic input.
    pub fn descendant_sets(&self) -> Vec<BTreeSet<ServerId>> {
        (0..self.len())
            .map(|s| {
                let mut seen = BTreeSet::new();
                let mut stack = self.children[s].clone();
                while let Some(x) = stack.pop() {
                    if seen.insert(x) {
                        stack.extend(self.children[x].iter().copied());
                    }
                }
                seen
            })
            .collect()
    }

    pub fn bcu_of(&self, s: ServerId) -> Result<Bcu, Error> {
        if s >= self.len() {
            return Err(Error::UnknownServer(s));
        }
        Ok(Bcu { host: s, children: self.children[s].clone() })
    }

    /// Post-order (children before parents) over the whole forest.
    pub fn leaves_first(&self) -> Result<Vec<ServerId>, Error> {
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        let mut state = vec![0u8; n];
        for root in 0..n {
            if self.parent[root].is_some() {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some(&mut (u, ref mut next)) = stack.last_mut() {
                if let Some(&c) = self.children[u].get(*next) {
                    *next += 1;
                    if state[c] != 0 {
                        return Err(Error::Cycle(c));
                    }
                    state[c] = 1;
                    stack.push((c, 0));
                } else {
                    state[u] = 2;
                    out.push(u);
                    stack.pop();
                }
            }
        }
        // Anything unvisited hangs off a cycle with no root.
        if let Some(s) = (0..n).find(|&s| state[s] == 0) {
            return Err(Error::Cycle(s));
        }
        Ok(out)
    }

    /// Edges between `s` and the root of its tree.
    pub fn depth(&self, s: ServerId) -> usize {
        let mut d = 0;
        let mut x = s;
        while let Some(p) = self.parent[x] {
            d += 1;
            x = p;
            assert!(d <= self.len(), "cycle through {s}");
        }
        d
    }

    /// Keep only `root` and its descendants up to `max_depth` edges below it; everything else is detached.
    pub fn restricted(&self, root: ServerId, max_depth: usize) -> CooperationForest {
        let n = self.len();
        let mut parent = vec![None; n];
        let mut frontier = vec![root];
        for _ in 0..max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut next = Vec::new();
            for &u in &frontier {
                for &c in &self.children[u] {
                    parent[c] = Some(u);
                    next.push(c);
                }
            }
            frontier = next;
        }
        let mut f = CooperationForest::from_parents(parent);
        f.order = self.order.clone();
        f
    }

    /// Checks every structural invariant against `states`.
    pub fn validate(&self, states: &[ServerState]) -> Result<(), String> {
        self.leaves_first().map_err(|e| e.to_string())?;
        for s in 0..self.len() {
            if let Some(p) = self.parent[s] {
                if !states[s].neighbors.contains(&p) {
                    return Err(format!("parent {p} of {s} is not a neighbor"));
                }
                if !self.children[p].contains(&s) {
                    return Err(format!("{s} missing from children of {p}"));
                }
            }
            if self.csm[s].contains(&s) {
                return Err(format!("{s} is in its own csm"));
            }
        }
        if self.csm != self.descendant_sets() {
            return Err("csm differs from recomputed descendant sets".into());
        }
        Ok(())
    }

    /// Parent-pointer lines, `server parent` or `server -` for roots.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (s, p) in self.parent.iter().enumerate() {
            match p {
                Some(p) => writeln!(out, "{s} {p}").unwrap(),
                None => writeln!(out, "{s} -").unwrap(),
            }
        }
        out
    }
}
