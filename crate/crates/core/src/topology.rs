//! Network graphs, built-in topologies and static shortest-path routing.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::hardware::{BsmDevice, NodeId, QuantumLink};
use crate::kernel::{rng_stream, RngPurpose};

pub type LinkId = usize;

/// Undirected link description, lengths in km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub km: f64,
}

#[derive(Debug, Clone)]
pub struct Topology {
    names: Vec<String>,
    pub links: Vec<QuantumLink>,
    adj: Vec<Vec<(NodeId, LinkId)>>,
    by_name: HashMap<String, NodeId>,
    pair_link: HashMap<(NodeId, NodeId), LinkId>,
}

impl Topology {
    pub fn new(
        names: Vec<String>,
        links: &[LinkSpec],
        attenuation_db_per_km: f64,
        bsm: BsmDevice,
    ) -> Result<Self, ConfigError> {
        let mut by_name = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if by_name.insert(n.clone(), NodeId(i)).is_some() {
                return Err(ConfigError::Invalid {
                    key: "topology.nodes".into(),
                    reason: format!("duplicate node name {n:?}"),
                });
            }
        }
        let mut topo = Topology {
            adj: vec![Vec::new(); names.len()],
            names,
            links: Vec::new(),
            by_name,
            pair_link: HashMap::new(),
        };
        for l in links {
            let lookup = |n: &str| {
                topo.by_name.get(n).copied().ok_or_else(|| ConfigError::Invalid {
                    key: "topology.links".into(),
                    reason: format!("unknown node {n:?}"),
                })
            };
            let (a, b) = (lookup(&l.a)?, lookup(&l.b)?);
            if a == b || !(l.km > 0.0) {
                return Err(ConfigError::Invalid {
                    key: "topology.links".into(),
                    reason: format!("bad link {}-{} ({} km)", l.a, l.b, l.km),
                });
            }
            let key = (a.min(b), a.max(b));
            if topo.pair_link.contains_key(&key) {
                return Err(ConfigError::Invalid {
                    key: "topology.links".into(),
                    reason: format!("duplicate link {}-{}", l.a, l.b),
                });
            }
            let id = topo.links.len();
            topo.links.push(QuantumLink {
                endpoints: key,
                length_km: l.km,
                attenuation_db_per_km,
                bsm,
            });
            topo.pair_link.insert(key, id);
            topo.adj[a.0].push((b, id));
            topo.adj[b.0].push((a, id));
        }
        for row in topo.adj.iter_mut() {
            row.sort();
        }
        Ok(topo)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, n: NodeId) -> &str {
        &self.names[n.0]
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.names.len()).map(NodeId)
    }

    /// Neighbours sorted by id, with the connecting link.
    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, LinkId)] {
        &self.adj[n.0]
    }

    pub fn link_between(&self, a: NodeId, b: NodeId) -> Option<LinkId> {
        self.pair_link.get(&(a.min(b), a.max(b))).copied()
    }

    /// Of a node pair, the one whose name sorts later owns pair decisions.
    pub fn primary(&self, a: NodeId, b: NodeId) -> NodeId {
        if self.name(a) > self.name(b) {
            a
        } else {
            b
        }
    }

    /// Total km along a node sequence.
    pub fn path_km(&self, path: &[NodeId]) -> f64 {
        path.windows(2)
            .map(|w| self.links[self.link_between(w[0], w[1]).expect("path uses a link")].length_km)
            .sum()
    }

    /// Shortest km distance from every node to `dst` (infinite if unreachable).
    fn distances_to(&self, dst: NodeId) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, NodeId);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        let mut dist = vec![f64::INFINITY; self.len()];
        dist[dst.0] = 0.0;
        let mut heap = BinaryHeap::from([Item(0.0, dst)]);
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u.0] {
                continue;
            }
            for &(v, l) in &self.adj[u.0] {
                let nd = d + self.links[l].length_km;
                if nd < dist[v.0] {
                    dist[v.0] = nd;
                    heap.push(Item(nd, v));
                }
            }
        }
        dist
    }

    /// Shortest path by km; equal-length alternatives resolve to the
    /// lexicographically smallest sequence of node names.
    pub fn static_route(&self, src: NodeId, dst: NodeId) -> Result<Vec<NodeId>, ConfigError> {
        let dist = self.distances_to(dst);
        self.route_with(&dist, src, dst)
    }

    fn route_with(&self, dist: &[f64], src: NodeId, dst: NodeId) -> Result<Vec<NodeId>, ConfigError> {
        if !dist[src.0].is_finite() {
            return Err(ConfigError::Unreachable {
                src: self.name(src).to_string(),
                dst: self.name(dst).to_string(),
            });
        }
        let tol = 1e-9 * (1.0 + dist[src.0]);
        let mut path = vec![src];
        let mut u = src;
        while u != dst {
            // Greedy smallest-name step that stays on a shortest path.
            u = self.adj[u.0]
                .iter()
                .filter(|&&(v, l)| (self.links[l].length_km + dist[v.0] - dist[u.0]).abs() <= tol)
                .map(|&(v, _)| v)
                .min_by(|a, b| self.name(*a).cmp(self.name(*b)))
                .expect("a shortest-path successor exists");
            path.push(u);
        }
        Ok(path)
    }

    pub fn is_connected(&self) -> bool {
        self.is_empty() || self.distances_to(NodeId(0)).iter().all(|d| d.is_finite())
    }
}

/// Pre-computed, fixed routes between every ordered node pair.
#[derive(Debug, Clone)]
pub struct ForwardingTable {
    /// `next[u][dst]`; `None` on the diagonal.
    next: Vec<Vec<Option<NodeId>>>,
}

impl ForwardingTable {
    pub fn build(topo: &Topology) -> Result<Self, ConfigError> {
        let n = topo.len();
        let mut next = vec![vec![None; n]; n];
        for dst in topo.nodes() {
            let dist = topo.distances_to(dst);
            for src in topo.nodes() {
                if src != dst {
                    let p = topo.route_with(&dist, src, dst)?;
                    next[src.0][dst.0] = Some(p[1]);
                }
            }
        }
        Ok(ForwardingTable { next })
    }

    pub fn next_hop(&self, u: NodeId, dst: NodeId) -> Option<NodeId> {
        self.next[u.0][dst.0]
    }

    pub fn path(&self, src: NodeId, dst: NodeId) -> Vec<NodeId> {
        let mut p = vec![src];
        let mut u = src;
        while u != dst {
            u = self.next[u.0][dst.0].expect("table covers every pair");
            p.push(u);
            assert!(p.len() <= self.next.len(), "routing loop");
        }
        p
    }
}

/// Built-in graphs. All links are `link_km` long.
pub mod builtin {
    use super::*;

    pub fn two_node(link_km: f64) -> (Vec<String>, Vec<LinkSpec>) {
        (
            vec!["n0".into(), "n1".into()],
            vec![LinkSpec { a: "n0".into(), b: "n1".into(), km: link_km }],
        )
    }

    pub const LEAVES_PER_SIDE: usize = 9;

    pub fn left_leaf(i: usize) -> String {
        format!("l{i}")
    }

    pub fn right_leaf(i: usize) -> String {
        format!("r{i}")
    }

    pub const LEFT_GATEWAY: &str = "lg";
    pub const RIGHT_GATEWAY: &str = "rg";

    /// Two clusters of ten, each fully connected: a gateway and nine leaves.
    /// The gateways share the single
    /// bottleneck link, so every left-to-right route is leaf, gateway,
    /// gateway, leaf.
    pub fn bottleneck20(link_km: f64) -> (Vec<String>, Vec<LinkSpec>) {
        let mut names = Vec::new();
        let mut links = Vec::new();
        let link = |a: &str, b: &str| LinkSpec { a: a.into(), b: b.into(), km: link_km };
        for (gw, leaf) in [
            (LEFT_GATEWAY, left_leaf as fn(usize) -> String),
            (RIGHT_GATEWAY, right_leaf as fn(usize) -> String),
        ] {
            names.push(gw.to_string());
            for i in 0..LEAVES_PER_SIDE {
                names.push(leaf(i));
                links.push(link(&leaf(i), gw));
                for j in 0..i {
                    links.push(link(&leaf(j), &leaf(i)));
                }
            }
        }
        links.push(link(LEFT_GATEWAY, RIGHT_GATEWAY));
        (names, links)
    }

    /// Preferential-attachment graph: each new node links to `attach`
    /// distinct existing nodes picked with probability proportional to degree.
    /// The seed fully determines the graph.
    pub fn as_graph(nodes: usize, attach: usize, seed: u64, link_km: f64) -> (Vec<String>, Vec<LinkSpec>) {
        assert!(nodes > attach && attach >= 1);
        let width = (nodes - 1).to_string().len();
        let names: Vec<String> = (0..nodes).map(|i| format!("n{i:0width$}")).collect();
        let mut rng = rng_stream(seed, 0, RngPurpose::Topology);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        // endpoint multiset, so a uniform pick is degree-proportional
        let mut ends: Vec<usize> = Vec::new();
        for i in 0..=attach {
            for j in 0..i {
                edges.push((j, i));
                ends.extend([j, i]);
            }
        }
        for v in attach + 1..nodes {
            let mut targets = BTreeSet::new();
            while targets.len() < attach {
                targets.insert(ends[rng.random_range(0..ends.len())]);
            }
            for t in targets {
                edges.push((t, v));
                ends.extend([t, v]);
            }
        }
        let links = edges
            .into_iter()
            .map(|(a, b)| LinkSpec { a: names[a].clone(), b: names[b].clone(), km: link_km })
            .collect();
        (names, links)
    }
}
