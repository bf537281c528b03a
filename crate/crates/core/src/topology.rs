//! Static undirected agent graphs. Neighborhoods are what an agent may
//! exchange U replicas with.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_ER_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    agents: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Normalizes edges to `(low, high)`, sorts and dedups them, and rejects
    /// self-loops, out-of-range endpoints and disconnected graphs.
    pub fn new(agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if agents == 0 {
            return Err(Error::config("topology needs at least one agent"));
        }
        let mut norm = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::config(format!("self-loop on agent {a}")));
            }
            if a >= agents || b >= agents {
                return Err(Error::config(format!(
                    "edge ({a}, {b}) references an agent outside 0..{agents}"
                )));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        // A connected graph on L vertices has at least L - 1 edges; checking this
        // first keeps absurd agent counts from allocating neighbor tables.
        if norm.len() + 1 < agents || !is_connected(agents, &norm) {
            return Err(Error::config(format!(
                "topology over {agents} agents is not connected"
            )));
        }
        let mut neighbors = vec![Vec::new(); agents];
        for &(a, b) in &norm {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Topology {
            agents,
            edges: norm,
            neighbors,
        })
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted one-hop neighborhood of `agent`.
    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.agents, &self.edges)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.agents);
        for (a, b) in &self.edges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }
}

/// Breadth-first reachability from agent 0 over an arbitrary edge list.
pub fn is_connected(agents: usize, edges: &[(usize, usize)]) -> bool {
    if agents <= 1 {
        return true;
    }
    let mut adj = vec![Vec::new(); agents];
    for &(a, b) in edges {
        if a < agents && b < agents {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut seen = vec![false; agents];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                reached += 1;
                queue.push_back(w);
            }
        }
    }
    reached == agents
}

/// Cycle `i ↔ (i+1) mod L`. One agent gives the empty graph; two give a single edge.
pub fn ring(agents: usize) -> Result<Topology> {
    let edges: Vec<_> = if agents < 2 {
        Vec::new()
    } else {
        (0..agents).map(|i| (i, (i + 1) % agents)).collect()
    };
    Topology::new(agents, edges)
}

pub fn complete(agents: usize) -> Result<Topology> {
    let edges = (0..agents).flat_map(|i| ((i + 1)..agents).map(move |j| (i, j)));
    Topology::new(agents, edges)
}

/// G(L, p) resampled until connected, at most 1000 draws.
pub fn erdos_renyi(agents: usize, p: f64, seed: u64) -> Result<Topology> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("edge probability must be in (0, 1], got {p}")));
    }
    if agents == 0 {
        return Err(Error::config("topology needs at least one agent"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ER_ATTEMPTS {
        let mut edges = Vec::new();
        for i in 0..agents {
            for j in (i + 1)..agents {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        if is_connected(agents, &edges) {
            return Topology::new(agents, edges);
        }
    }
    Err(Error::Generation(format!(
        "no connected G({agents}, {p}) graph in {MAX_ER_ATTEMPTS} draws; increase the edge probability"
    )))
}

/// Parses the edge-list format: first line `L`, then one `i j` pair per line.
/// Blank lines and `#` comments are ignored.
pub fn parse_topology(text: &str) -> Result<Topology> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (first_no, first) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty topology file"))?;
    let agents: usize = first
        .parse()
        .map_err(|_| Error::parse(first_no, format!("expected agent count, found {first:?}")))?;
    let mut edges = Vec::new();
    for (no, line) in lines {
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(no, format!("expected `i j`, found {line:?}")))
        };
        let (a, b) = (next()?, next()?);
        if parts.next().is_some() {
            return Err(Error::parse(no, format!("expected `i j`, found {line:?}")));
        }
        edges.push((a, b));
    }
    Topology::new(agents, edges)
}

pub fn load_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topology(&text)
}
