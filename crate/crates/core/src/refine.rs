//! Graph clean-up and conversion of the predicted graph into a rooted tree.

use std::collections::{BTreeSet, VecDeque};

use crate::connectivity::{edge, DisjointSets, Edge};
use crate::error::{invalid, Error, Result};
use crate::geom;
use crate::skeleton::SkeletalPoint;
use crate::swc::{NeuronTree, SwcNode, DEFAULT_NODE_TYPE};

pub const DEFAULT_SPUR_LEN: f64 = 3.0;
pub const DEFAULT_GAP_DIST: f64 = 5.0;

/// Undirected graph over skeletal points; edges are unique `(low, high)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconGraph {
    pub nodes: Vec<SkeletalPoint>,
    pub edges: Vec<Edge>,
}

impl ReconGraph {
    /// Normalizes, deduplicates and sorts `edges`; self-edges are dropped.
    pub fn new(nodes: Vec<SkeletalPoint>, edges: &[Edge]) -> Result<Self> {
        if edges
            .iter()
            .any(|&(a, b)| a >= nodes.len() || b >= nodes.len())
        {
            return Err(invalid("edge index out of range"));
        }
        let set: BTreeSet<Edge> = edges
            .iter()
            .filter(|e| e.0 != e.1)
            .map(|&(a, b)| edge(a, b))
            .collect();
        Ok(Self {
            nodes,
            edges: set.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            out[a].push(b);
            out[b].push(a);
        }
        for n in &mut out {
            n.sort_unstable();
        }
        out
    }

    /// Component label per node (the lowest index in the component).
    pub fn components(&self) -> Vec<usize> {
        let mut sets = DisjointSets::new(self.nodes.len());
        for &(a, b) in &self.edges {
            sets.union(a, b);
        }
        (0..self.nodes.len()).map(|i| sets.find(i)).collect()
    }

    pub fn component_count(&self) -> usize {
        let c = self.components();
        (0..c.len()).filter(|&i| c[i] == i).count()
    }

    fn edge_len(&self, a: usize, b: usize) -> f64 {
        geom::dist(&self.nodes[a].position, &self.nodes[b].position)
    }

    /// Copy without the listed nodes; indices are compacted in order.
    fn without(&self, drop: &[bool]) -> Self {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (i, p) in self.nodes.iter().enumerate() {
            if !drop[i] {
                remap[i] = nodes.len();
                nodes.push(p.clone());
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| !drop[a] && !drop[b])
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect();
        Self { nodes, edges }
    }
}

/// Repeatedly deletes leaf branches shorter than `min_len`. A leaf branch
/// runs from a degree-1 node through degree-2 nodes to a node of degree at
/// least 3, which is kept.
pub fn remove_spurs(g: &ReconGraph, min_len: f64) -> Result<ReconGraph> {
    if !(min_len >= 0.0) {
        return Err(invalid("spur length must be non-negative"));
    }
    let mut g = g.clone();
    loop {
        let nbrs = g.neighbors();
        let mut drop = vec![false; g.len()];
        for leaf in (0..g.len()).filter(|&i| nbrs[i].len() == 1) {
            let mut path = vec![leaf];
            let mut len = 0.0;
            let (mut prev, mut cur) = (leaf, nbrs[leaf][0]);
            loop {
                len += g.edge_len(prev, cur);
                if nbrs[cur].len() != 2 {
                    break;
                }
                path.push(cur);
                let next = if nbrs[cur][0] == prev {
                    nbrs[cur][1]
                } else {
                    nbrs[cur][0]
                };
                (prev, cur) = (cur, next);
            }
            if nbrs[cur].len() >= 3 && len < min_len {
                for i in path {
                    drop[i] = true;
                }
            }
        }
        if !drop.iter().any(|&d| d) {
            return Ok(g);
        }
        g = g.without(&drop);
    }
}

/// Joins components while the closest cross-component pair is within
/// `d_gap`. Pairs of endpoints (degree at most 1) are tried first, then any
/// node pair.
pub fn bridge_gaps(g: &ReconGraph, d_gap: f64) -> Result<ReconGraph> {
    if !(d_gap > 0.0) {
        return Err(invalid("gap distance must be positive"));
    }
    let mut g = g.clone();
    loop {
        let comp = g.components();
        let nbrs = g.neighbors();
        let n = g.len();
        let closest = |endpoints_only: bool| {
            let mut best: Option<(f64, Edge)> = None;
            for i in 0..n {
                if endpoints_only && nbrs[i].len() > 1 {
                    continue;
                }
                for j in i + 1..n {
                    if comp[i] == comp[j] || (endpoints_only && nbrs[j].len() > 1) {
                        continue;
                    }
                    let d = g.edge_len(i, j);
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, (i, j)));
                    }
                }
            }
            best.filter(|b| b.0 <= d_gap)
        };
        match closest(true).or_else(|| closest(false)) {
            Some((_, e)) => {
                g.edges.push(e);
                g.edges.sort_unstable();
            }
            None => return Ok(g),
        }
    }
}

/// Breadth-first spanning forest rooted at each component's largest-radius
/// node, emitted as SWC with ids in visit order.
pub fn build_swc(g: &ReconGraph) -> Result<NeuronTree> {
    if g.is_empty() {
        return Err(Error::Empty(
            "cannot build a tree from an empty graph".into(),
        ));
    }
    let comp = g.components();
    let nbrs = g.neighbors();
    let mut roots: Vec<usize> = Vec::new();
    for c in (0..g.len()).filter(|&i| comp[i] == i) {
        let root = (0..g.len())
            .filter(|&i| comp[i] == c)
            .max_by(|&a, &b| {
                g.nodes[a]
                    .radius
                    .total_cmp(&g.nodes[b].radius)
                    .then(b.cmp(&a))
            })
            .expect("component has a member");
        roots.push(root);
    }
    let mut id = vec![0i64; g.len()];
    let mut out = Vec::with_capacity(g.len());
    let mut next = 1i64;
    for root in roots {
        let mut queue = VecDeque::from([(root, -1i64)]);
        id[root] = next;
        next += 1;
        while let Some((v, parent)) = queue.pop_front() {
            let p = &g.nodes[v];
            out.push(SwcNode {
                id: id[v],
                node_type: DEFAULT_NODE_TYPE,
                position: p.position,
                radius: p.radius,
                parent_id: parent,
            });
            for &w in &nbrs[v] {
                if id[w] == 0 {
                    id[w] = next;
                    next += 1;
                    queue.push_back((w, id[v]));
                }
            }
        }
    }
    Ok(NeuronTree::new(out))
}
