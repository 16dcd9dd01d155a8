//! Random edge-server graph with one attached mobile user.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{MobileUser, ServerId, ServerState, SimConfig};
use crate::Error;

/// RNG stream used for topology draws; the engine uses other streams of the same seed.
pub const TOPOLOGY_STREAM: u64 = 0;
const SERVER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub servers: Vec<ServerState>,
    pub user: MobileUser,
}

pub fn generate(cfg: &SimConfig, seed: u64) -> Result<Topology, Error> {
    let n = cfg.n_servers;
    let dmax = cfg.degree_max;
    if n < 2 {
        return Err(Error::Unsatisfiable(format!("{n} server(s) cannot all have degree >= 1")));
    }
    if dmax == 0 || (dmax == 1 && n % 2 == 1) {
        return Err(Error::Unsatisfiable(format!("{n} servers with degree_max {dmax}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TOPOLOGY_STREAM);

    // Per-server attributes come from a stream of their own, so server `i` looks
    // the same whatever the pool size.
    let mut target = Vec::with_capacity(n);
    let mut cpu = Vec::with_capacity(n);
    let mut fwd = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(SERVER_STREAM_BASE + i as u64);
        target.push(r.random_range(1..=dmax));
        cpu.push(r.random_range(cfg.cpu_range.lo..=cfg.cpu_range.hi));
        fwd.push(r.random_range(cfg.fwd_cpu_range.lo..=cfg.fwd_cpu_range.hi));
    }

    let mut stubs: Vec<ServerId> = target.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect();
    stubs.shuffle(&mut rng);
    let mut adj: Vec<Vec<ServerId>> = vec![Vec::new(); n];
    for pair in stubs.chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        if a != b && !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }

    // Servers whose stubs were all dropped get wired to someone with spare degree.
    for v in 0..n {
        if !adj[v].is_empty() {
            continue;
        }
        let spare: Vec<ServerId> = (0..n).filter(|&u| u != v && adj[u].len() < dmax).collect();
        if !spare.is_empty() {
            let u = spare[rng.random_range(0..spare.len())];
            adj[v].push(u);
            adj[u].push(v);
            continue;
        }
        // Everyone else is full: splice v into an existing edge.
        let edges: Vec<(ServerId, ServerId)> = (0..n)
            .flat_map(|a| adj[a].iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect();
        if dmax < 2 || edges.is_empty() {
            return Err(Error::Unsatisfiable(format!("server {v} cannot be connected")));
        }
        let (a, b) = edges[rng.random_range(0..edges.len())];
        adj[a].retain(|&x| x != b);
        adj[b].retain(|&x| x != a);
        for u in [a, b] {
            adj[v].push(u);
            adj[u].push(v);
        }
    }

    let servers = (0..n)
        .map(|i| {
            let mut nb = std::mem::take(&mut adj[i]);
            nb.sort_unstable();
            ServerState::idle(i, cpu[i], fwd[i], cfg.fwd_cost(fwd[i]), nb)
        })
        .collect();
    // Server attributes and wiring are already random, so the user simply sits at server 0.
    let user = MobileUser { id: 0, cpu_hz: cfg.user_cpu, fwd_cost: cfg.user_fwd_cost(), home: 0 };
    Ok(Topology { servers, user })
}

impl Topology {
    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn neighbors(&self, s: ServerId) -> &[ServerId] {
        &self.servers[s].neighbors
    }

    pub fn degree(&self, s: ServerId) -> usize {
        self.servers[s].neighbors.len()
    }

    fn check(&self, s: ServerId) -> Result<(), Error> {
        if s < self.servers.len() {
            Ok(())
        } else {
            Err(Error::UnknownServer(s))
        }
    }

    /// Hop distances from `src` to every server; `None` where unreachable.
    pub fn bfs(&self, src: ServerId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.servers.len()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap() + 1;
            for &v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(d);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest-path hop count, `None` when the two servers lie in separate components.
    pub fn hop_distance(&self, a: ServerId, b: ServerId) -> Result<Option<usize>, Error> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.bfs(a)[b])
    }

    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.servers.len()];
        let mut count = 0;
        for s in 0..self.servers.len() {
            if seen[s] {
                continue;
            }
            count += 1;
            for (v, d) in self.bfs(s).into_iter().enumerate() {
                if d.is_some() {
                    seen[v] = true;
                }
            }
        }
        count
    }

    pub fn dump(&self) -> String {
        let mut out = String::from("# conet topology v1\n");
        let u = &self.user;
        writeln!(out, "user {} {} {}", u.cpu_hz, u.fwd_cost, u.home).unwrap();
        for s in &self.servers {
            let nb = if s.neighbors.is_empty() {
                "-".to_string()
            } else {
                s.neighbors.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(out, "{} {} {} {}", s.id, s.cpu_hz, s.fwd_hz, nb).unwrap();
        }
        out
    }

    /// Inverse of [`Topology::dump`]; forwarding costs are rederived from `cfg`.
    pub fn load(text: &str, cfg: &SimConfig) -> Result<Self, Error> {
        let mut servers = Vec::new();
        let mut user = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse { line, msg: msg.to_string() };
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number {s:?}")));
            if fields[0] == "user" {
                if fields.len() != 4 {
                    return Err(err("user line needs cpu, fwd_cost, home"));
                }
                let home = fields[3].parse().map_err(|_| err("bad home id"))?;
                user = Some(MobileUser { id: 0, cpu_hz: num(fields[1])?, fwd_cost: num(fields[2])?, home });
                continue;
            }
            if fields.len() != 4 {
                return Err(err("server line needs id, f_s, f_fwd, neighbors"));
            }
            let id: ServerId = fields[0].parse().map_err(|_| err("bad server id"))?;
            if id != servers.len() {
                return Err(err("server ids must be consecutive from 0"));
            }
            let neighbors = if fields[3] == "-" {
                Vec::new()
            } else {
                fields[3]
                    .split(',')
                    .map(|x| x.parse().map_err(|_| err(&format!("bad neighbor {x:?}"))))
                    .collect::<Result<Vec<ServerId>, _>>()?
            };
            let f = num(fields[1])?;
            let ff = num(fields[2])?;
            servers.push(ServerState::idle(id, f, ff, cfg.fwd_cost(ff), neighbors));
        }
        let user = user.ok_or(Error::Parse { line: 0, msg: "missing user line".into() })?;
        let n = servers.len();
        if user.home >= n {
            return Err(Error::UnknownServer(user.home));
        }
        for s in &servers {
            for &v in &s.neighbors {
                if v >= n || v == s.id || !servers[v].neighbors.contains(&s.id) {
                    return Err(Error::Parse { line: s.id + 3, msg: format!("edge {}-{v} is not symmetric", s.id) });
                }
            }
        }
        Ok(Topology { servers, user })
    }

    /// Build a topology from explicit parts; used for fixtures.
    pub fn from_parts(servers: Vec<ServerState>, home: ServerId, user_cpu: f64, user_fwd_cost: f64) -> Self {
        Topology { servers, user: MobileUser { id: 0, cpu_hz: user_cpu, fwd_cost: user_fwd_cost, home } }
    }
}
