//! The tournament tree: node memberships, uplinks, ℓ-links and intra-node
//! regular graphs.
//!
//! Levels run from 1 (leaves) to `ℓ* + 1` (the root, which holds every
//! processor). A node at level `L` has `k_L = k1·q^(L−1)` member slots; a
//! slot is a position in the node's member list, and one processor may fill
//! several slots when memberships overlap.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::params::ProtocolParams;
use crate::rng::{self, tags, Rng};
use crate::sampler::{build_random_sampler, SamplerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("no {degree}-regular graph on {size} vertices (size·degree is odd)")]
    OddDegree { size: usize, degree: usize },
    #[error("regular graph construction failed after {0} restarts")]
    RetriesExhausted(usize),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Params(#[from] crate::params::ParamsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId {
    pub level: usize,
    pub index: usize,
}

impl NodeId {
    pub fn new(level: usize, index: usize) -> Self {
        NodeId { level, index }
    }

    /// Dense id, unique across levels for trees with < 2^32 nodes per level.
    pub fn key(self) -> u64 {
        ((self.level as u64) << 32) | self.index as u64
    }
}

/// Undirected simple graph on the slots of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Graph {
    Complete(usize),
    Adjacency(Vec<Vec<usize>>),
}

impl Graph {
    pub fn size(&self) -> usize {
        match self {
            Graph::Complete(k) => *k,
            Graph::Adjacency(a) => a.len(),
        }
    }

    pub fn degree(&self, v: usize) -> usize {
        match self {
            Graph::Complete(k) => k - 1,
            Graph::Adjacency(a) => a[v].len(),
        }
    }

    pub fn neighbors(&self, v: usize) -> Box<dyn Iterator<Item = usize> + '_> {
        match self {
            Graph::Complete(k) => Box::new((0..*k).filter(move |&u| u != v)),
            Graph::Adjacency(a) => Box::new(a[v].iter().copied()),
        }
    }

    pub fn is_regular(&self, degree: usize) -> bool {
        (0..self.size()).all(|v| self.degree(v) == degree)
    }

    pub fn is_simple(&self) -> bool {
        match self {
            Graph::Complete(_) => true,
            Graph::Adjacency(a) => a.iter().enumerate().all(|(v, nb)| {
                let mut s = nb.clone();
                s.sort_unstable();
                s.dedup();
                s.len() == nb.len() && !nb.contains(&v) && nb.iter().all(|&u| a[u].contains(&v))
            }),
        }
    }
}

/// Uniform-ish random `degree`-regular graph on `size` vertices by the
/// pairing model, pairing one random suitable point pair at a time and
/// restarting when the remaining points admit no suitable pair.
pub fn random_regular_graph(size: usize, degree: usize, rng: &mut Rng) -> Result<Graph, TopologyError> {
    if degree + 1 >= size {
        return Ok(Graph::Complete(size));
    }
    if (size * degree) % 2 == 1 {
        return Err(TopologyError::OddDegree { size, degree });
    }
    const RESTARTS: usize = 200;
    'restart: for _ in 0..RESTARTS {
        let mut points: Vec<usize> = (0..size).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
        let mut adj: Vec<Vec<usize>> = vec![Vec::with_capacity(degree); size];
        while !points.is_empty() {
            let len = points.len();
            let mut paired = false;
            for _ in 0..(4 * len).max(32) {
                let i = rng.gen_range(0..len);
                let j = rng.gen_range(0..len);
                let (u, v) = (points[i], points[j]);
                if i != j && u != v && !adj[u].contains(&v) {
                    adj[u].push(v);
                    adj[v].push(u);
                    let (hi, lo) = if i > j { (i, j) } else { (j, i) };
                    points.swap_remove(hi);
                    points.swap_remove(lo);
                    paired = true;
                    break;
                }
            }
            if !paired {
                let any = (0..len).any(|i| {
                    (i + 1..len).any(|j| points[i] != points[j] && !adj[points[i]].contains(&points[j]))
                });
                if !any {
                    continue 'restart;
                }
            }
        }
        return Ok(Graph::Adjacency(adj));
    }
    Err(TopologyError::RetriesExhausted(RESTARTS))
}

#[derive(Debug, Clone)]
pub struct TreeTopology {
    pub params: ProtocolParams,
    /// `members[L-1][i]`: processors in slot order.
    members: Vec<Vec<Vec<usize>>>,
    /// `uplinks[L-1][i][slot]`: parent slots, for levels below the root.
    uplinks: Vec<Vec<Vec<Vec<usize>>>>,
    /// `elllinks[L-1][i][slot]`: global level-1 indices, for levels >= 2.
    elllinks: Vec<Vec<Vec<Vec<usize>>>>,
    intra: Vec<Vec<Graph>>,
    leaf_of: Vec<usize>,
    /// `slots[L-1][pid]`: `(node index, slot)` pairs held by `pid`.
    slots: Vec<Vec<Vec<(usize, usize)>>>,
}

/// Good/bad flag per node, indexed `[L-1][i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub good: Vec<Vec<bool>>,
}

impl Classification {
    pub fn is_good(&self, node: NodeId) -> bool {
        self.good[node.level - 1][node.index]
    }

    pub fn bad_fraction(&self, level: usize) -> f64 {
        let row = &self.good[level - 1];
        row.iter().filter(|&&g| !g).count() as f64 / row.len() as f64
    }
}

impl TreeTopology {
    pub fn root(&self) -> NodeId {
        NodeId::new(self.params.root_level(), 0)
    }

    pub fn levels(&self) -> usize {
        self.params.root_level()
    }

    pub fn node_count(&self, level: usize) -> usize {
        self.members[level - 1].len()
    }

    pub fn nodes(&self, level: usize) -> impl Iterator<Item = NodeId> {
        (0..self.node_count(level)).map(move |i| NodeId::new(level, i))
    }

    pub fn members(&self, node: NodeId) -> &[usize] {
        &self.members[node.level - 1][node.index]
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        if node.level >= self.levels() {
            return None;
        }
        let up = node.level + 1;
        let index = if up == self.levels() { 0 } else { node.index / self.params.q };
        Some(NodeId::new(up, index))
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        if node.level <= 1 {
            return Vec::new();
        }
        let down = node.level - 1;
        if node.level == self.levels() {
            return self.nodes(down).collect();
        }
        let q = self.params.q;
        (node.index * q..(node.index + 1) * q)
            .map(|i| NodeId::new(down, i))
            .collect()
    }

    /// Which child of its parent this node is.
    pub fn child_position(&self, node: NodeId) -> usize {
        if node.level + 1 == self.levels() {
            node.index
        } else {
            node.index % self.params.q
        }
    }

    /// Level-1 descendants as a contiguous index range.
    pub fn leaf_range(&self, node: NodeId) -> std::ops::Range<usize> {
        if node.level == self.levels() {
            return 0..self.node_count(1);
        }
        let span = self.params.q.pow((node.level - 1) as u32);
        node.index * span..(node.index + 1) * span
    }

    /// Ancestors from `node` (inclusive) up to the root.
    pub fn path_to_root(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            out.push(p);
            cur = p;
        }
        out
    }

    /// Parent slots reached from `slot` of `node`.
    pub fn uplinks(&self, node: NodeId, slot: usize) -> &[usize] {
        &self.uplinks[node.level - 1][node.index][slot]
    }

    /// Level-1 nodes linked to `slot` of `node` (level >= 2).
    pub fn elllinks(&self, node: NodeId, slot: usize) -> &[usize] {
        &self.elllinks[node.level - 1][node.index][slot]
    }

    pub fn intra(&self, node: NodeId) -> &Graph {
        &self.intra[node.level - 1][node.index]
    }

    /// Leaf that receives processor `pid`'s array.
    pub fn leaf_of(&self, pid: usize) -> usize {
        self.leaf_of[pid]
    }

    /// Processors whose arrays start at `leaf`, in increasing order.
    pub fn owners_of_leaf(&self, leaf: usize) -> Vec<usize> {
        (0..self.params.n).filter(|&p| self.leaf_of[p] == leaf).collect()
    }

    pub fn slots_of(&self, pid: usize, level: usize) -> &[(usize, usize)] {
        &self.slots[level - 1][pid]
    }

    /// Number of ℓ-link endpoints landing on each level-1 node.
    pub fn elllink_load(&self) -> Vec<usize> {
        let mut load = vec![0; self.node_count(1)];
        for level in &self.elllinks[1..] {
            for node in level {
                for slot in node {
                    for &leaf in slot {
                        load[leaf] += 1;
                    }
                }
            }
        }
        load
    }

    /// Good iff the fraction of uncorrupted member slots is at least `2/3 + ε/2`.
    pub fn classify_nodes(&self, corrupted: &[bool]) -> Classification {
        let threshold = self.params.good_node_threshold();
        let good = self
            .members
            .iter()
            .map(|level| {
                level
                    .iter()
                    .map(|m| {
                        let honest = m.iter().filter(|&&p| !corrupted[p]).count();
                        honest as f64 >= threshold * m.len() as f64 - 1e-12
                    })
                    .collect()
            })
            .collect();
        Classification { good }
    }

    /// Fraction of `node`'s level-1 descendants whose whole path up to
    /// `node` is good.
    pub fn good_paths(&self, node: NodeId, cls: &Classification) -> f64 {
        let range = self.leaf_range(node);
        let total = range.len();
        let ok = range
            .filter(|&leaf| {
                let mut cur = NodeId::new(1, leaf);
                loop {
                    if !cls.is_good(cur) {
                        return false;
                    }
                    if cur == node {
                        return true;
                    }
                    cur = self.parent(cur).expect("node is an ancestor");
                }
            })
            .count();
        ok as f64 / total as f64
    }

    /// One line per edge-family entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for level in 1..=self.levels() {
            for node in self.nodes(level) {
                let m: Vec<String> = self.members(node).iter().map(usize::to_string).collect();
                let _ = writeln!(out, "members {} {}: {}", level, node.index, m.join(" "));
                for slot in 0..self.members(node).len() {
                    if level < self.levels() {
                        let u: Vec<String> = self.uplinks(node, slot).iter().map(usize::to_string).collect();
                        let _ = writeln!(out, "uplink {} {} {}: {}", level, node.index, slot, u.join(" "));
                    }
                    if level >= 2 {
                        let e: Vec<String> = self.elllinks(node, slot).iter().map(usize::to_string).collect();
                        let _ = writeln!(out, "elllink {} {} {}: {}", level, node.index, slot, e.join(" "));
                    }
                }
                match self.intra(node) {
                    Graph::Complete(k) => {
                        let _ = writeln!(out, "intra {} {}: complete {}", level, node.index, k);
                    }
                    Graph::Adjacency(adj) => {
                        for (slot, nb) in adj.iter().enumerate() {
                            let e: Vec<String> = nb.iter().map(usize::to_string).collect();
                            let _ = writeln!(out, "intra {} {} {}: {}", level, node.index, slot, e.join(" "));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Builds the tree deterministically from `seed`.
pub fn build_topology(params: &ProtocolParams, seed: u64) -> Result<TreeTopology, TopologyError> {
    params.validate()?;
    let p = params;
    let n = p.n;
    let levels = p.root_level();
    let m = p.membership_factor;

    // Memberships.
    let mut members: Vec<Vec<Vec<usize>>> = Vec::with_capacity(levels);
    let mut member_rng = rng::stream(seed, &[tags::TOPOLOGY, tags::MEMBERS]);
    let leaf_of: Vec<usize>;
    if m == 1 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut member_rng);
        for level in 1..=levels {
            let size = p.node_size(level);
            members.push(perm.chunks(size).map(<[usize]>::to_vec).collect());
        }
        let mut lo = vec![0; n];
        for (pos, &pid) in perm.iter().enumerate() {
            lo[pid] = pos / p.k1;
        }
        leaf_of = lo;
    } else {
        for level in 1..levels {
            let count = p.node_count(level);
            let smp = build_random_sampler(
                count,
                n,
                p.node_size(level),
                0.0,
                1.0,
                rng::derive_seed(seed, &[tags::TOPOLOGY, tags::MEMBERS, level as u64]),
                true,
            )?;
            members.push(smp.assignment().to_vec());
        }
        members.push(vec![(0..n).collect()]);
        let per_leaf = p.arrays_per_leaf();
        leaf_of = (0..n).map(|pid| pid / per_leaf).collect();
    }

    // Uplinks: one sampler per child node, from child slots to parent slots.
    let mut uplinks = Vec::with_capacity(levels);
    for level in 1..=levels {
        if level == levels {
            uplinks.push(Vec::new());
            continue;
        }
        let mut row = Vec::with_capacity(members[level - 1].len());
        for i in 0..members[level - 1].len() {
            let smp = build_random_sampler(
                p.node_size(level),
                p.node_size(level + 1),
                p.uplink_degree,
                0.0,
                1.0,
                rng::derive_seed(seed, &[tags::TOPOLOGY, tags::UPLINKS, level as u64, i as u64]),
                true,
            )?;
            row.push(smp.assignment().to_vec());
        }
        uplinks.push(row);
    }

    // ℓ-links: from each slot of a level >= 2 node to its level-1 descendants.
    let q = p.q;
    let mut elllinks = Vec::with_capacity(levels);
    elllinks.push(Vec::new());
    for level in 2..=levels {
        let count = members[level - 1].len();
        let mut row = Vec::with_capacity(count);
        for i in 0..count {
            let (lo, span) = if level == levels {
                (0, members[0].len())
            } else {
                let span = q.pow((level - 1) as u32);
                (i * span, span)
            };
            let smp = build_random_sampler(
                p.node_size(level),
                span,
                p.elllink_degree,
                0.0,
                1.0,
                rng::derive_seed(seed, &[tags::TOPOLOGY, tags::ELLLINKS, level as u64, i as u64]),
                true,
            )?;
            row.push(
                smp.assignment()
                    .iter()
                    .map(|img| img.iter().map(|&y| lo + y).collect())
                    .collect(),
            );
        }
        elllinks.push(row);
    }

    // Intra-node regular graphs.
    let mut intra = Vec::with_capacity(levels);
    for level in 1..=levels {
        let size = p.node_size(level);
        let degree = p.intra_degree_for(size);
        let mut row = Vec::with_capacity(members[level - 1].len());
        for i in 0..members[level - 1].len() {
            let mut g = rng::stream(seed, &[tags::TOPOLOGY, tags::INTRA, level as u64, i as u64]);
            row.push(random_regular_graph(size, degree, &mut g)?);
        }
        intra.push(row);
    }

    let mut slots = vec![vec![Vec::new(); n]; levels];
    for (l, level) in members.iter().enumerate() {
        for (i, node) in level.iter().enumerate() {
            for (s, &pid) in node.iter().enumerate() {
                slots[l][pid].push((i, s));
            }
        }
    }

    Ok(TreeTopology {
        params: p.clone(),
        members,
        uplinks,
        elllinks,
        intra,
        leaf_of,
        slots,
    })
}
