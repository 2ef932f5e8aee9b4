//! Skeleton graph construction, GCN auto-encoder and link extraction.
//!
//! Parameters live under `gae.*`.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{
    insert_batchnorm, matmul_nt, sigmoid, BnMode, ParamStore, Session, SparseMatrix, Tensor, Var,
};
use crate::encoder::knn_graph_points;
use crate::error::{invalid, shape_err, Error, Result};
use crate::geom::{self, Point3};
use crate::skeleton::SkeletalPoint;
use crate::swc::NeuronTree;

pub const DEFAULT_K_CAND: usize = 8;
pub const DEFAULT_TAU: f64 = 0.5;
pub const GCN_CHANNELS: [usize; 12] = [32, 32, 48, 64, 64, 80, 96, 96, 102, 128, 128, 144];
/// Inference candidates are capped at this multiple of the median
/// nearest-neighbor distance.
pub const EDGE_CAP_FACTOR: f64 = 3.0;

/// Undirected edge stored as `(low, high)`.
pub type Edge = (usize, usize);

pub fn edge(a: usize, b: usize) -> Edge {
    (a.min(b), a.max(b))
}

/// Union-find with path halving.
#[derive(Debug, Clone)]
pub struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; false if already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // smaller root wins, keeps representatives deterministic
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub nodes: Vec<SkeletalPoint>,
    /// `[N_s, F + 4]`: feature, centered position, radius.
    pub features: Tensor,
    pub candidates: Vec<Edge>,
    /// Positive (A = 1) pairs.
    pub adjacency: Vec<Edge>,
    pub mask: Vec<Edge>,
    pub mask_labels: Vec<f64>,
}

impl SkeletonGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.nodes.iter().map(|p| p.position).collect()
    }
}

/// Node feature rows: feature vector, position relative to the bounding-box
/// center, radius.
pub fn node_features(nodes: &[SkeletalPoint]) -> Result<Tensor> {
    if nodes.is_empty() {
        return Err(Error::Empty("skeleton has no points".into()));
    }
    let f = nodes[0].feature.len();
    if nodes.iter().any(|p| p.feature.len() != f) {
        return Err(shape_err("skeletal feature widths differ"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in nodes {
        for a in 0..3 {
            lo[a] = lo[a].min(p.position[a]);
            hi[a] = hi[a].max(p.position[a]);
        }
    }
    let mut data = Vec::with_capacity(nodes.len() * (f + 4));
    for p in nodes {
        data.extend_from_slice(&p.feature);
        for a in 0..3 {
            data.push(p.position[a] - 0.5 * (lo[a] + hi[a]));
        }
        data.push(p.radius);
    }
    Tensor::matrix(nodes.len(), f + 4, data)
}

/// Node feature rows with the centered position columns rotated by `m`.
pub fn rotate_node_positions(features: &Tensor, m: &[[f64; 3]; 3]) -> Result<Tensor> {
    let cols = features.cols();
    if features.shape().len() != 2 || cols < 4 {
        return Err(shape_err("node features need position and radius columns"));
    }
    let mut out = features.clone();
    let f = cols - 4;
    for row in out.data_mut().chunks_mut(cols) {
        let p = geom::mat_vec(m, &[row[f], row[f + 1], row[f + 2]]);
        row[f..f + 3].copy_from_slice(&p);
    }
    Ok(out)
}

/// Undirected k-NN edges, `k` clipped to `n - 1`.
pub fn knn_edges(positions: &[Point3], k: usize) -> Result<Vec<Edge>> {
    let n = positions.len();
    if n < 2 || k == 0 {
        return Ok(Vec::new());
    }
    let g = knn_graph_points(positions, k.min(n - 1))?;
    let set: BTreeSet<Edge> = (0..n)
        .flat_map(|i| g.row(i).iter().map(move |&j| edge(i, j)))
        .collect();
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainGraphConfig {
    pub k_cand: usize,
    /// Skeletal points farther than `max(r, 1) + margin` from their nearest
    /// reference node stay unassigned. Infinite keeps every assignment.
    pub assign_margin: f64,
    pub seed: u64,
}

impl Default for TrainGraphConfig {
    fn default() -> Self {
        Self {
            k_cand: DEFAULT_K_CAND,
            assign_margin: f64::INFINITY,
            seed: 0,
        }
    }
}

/// Nearest reference node per skeletal point, `None` beyond the margin.
pub fn assign_to_tree(
    nodes: &[SkeletalPoint],
    tree: &NeuronTree,
    margin: f64,
) -> Vec<Option<usize>> {
    let gt = tree.positions();
    nodes
        .iter()
        .map(|p| {
            let (j, d2) = geom::nearest(&p.position, &gt)?;
            let reach = tree.nodes[j].radius.max(1.0) + margin;
            (d2.sqrt() <= reach).then_some(j)
        })
        .collect()
}

/// Positive pairs implied by the reference tree.
///
/// Points sharing a node, or assigned to a node and its parent, are linked
/// pairwise. Where the chain between two assigned nodes skips unassigned
/// ancestors, the closest pair across the gap is linked instead.
pub fn tree_positives(nodes: &[SkeletalPoint], tree: &NeuronTree, margin: f64) -> Vec<Edge> {
    let assign = assign_to_tree(nodes, tree, margin);
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); tree.len()];
    for (i, a) in assign.iter().enumerate() {
        if let Some(j) = a {
            owners[*j].push(i);
        }
    }
    let parents = tree.parent_indices();
    let mut out = BTreeSet::new();
    for v in 0..tree.len() {
        let here = &owners[v];
        if here.is_empty() {
            continue;
        }
        for (a, &p) in here.iter().enumerate() {
            for &q in &here[a + 1..] {
                out.insert(edge(p, q));
            }
        }
        let mut u = parents[v];
        let mut hops = 1;
        while let Some(w) = u {
            if !owners[w].is_empty() {
                break;
            }
            u = parents[w];
            hops += 1;
        }
        let Some(u) = u else { continue };
        if hops == 1 {
            for &p in here {
                for &q in &owners[u] {
                    out.insert(edge(p, q));
                }
            }
        } else {
            let mut best = (f64::INFINITY, 0, 0);
            for &p in here {
                for &q in &owners[u] {
                    let d = geom::dist2(&nodes[p].position, &nodes[q].position);
                    if d < best.0 {
                        best = (d, p, q);
                    }
                }
            }
            out.insert(edge(best.1, best.2));
        }
    }
    out.into_iter().collect()
}

/// Positives plus an equal-size seeded sample of candidate negatives.
pub fn balanced_mask(candidates: &[Edge], positives: &[Edge], seed: u64) -> (Vec<Edge>, Vec<f64>) {
    let pos: BTreeSet<Edge> = positives.iter().copied().collect();
    let negatives: Vec<Edge> = candidates
        .iter()
        .copied()
        .filter(|e| !pos.contains(e))
        .collect();
    let m = positives.len().min(negatives.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, negatives.len(), m).into_vec();
    picked.sort_unstable();
    let mut mask: Vec<Edge> = positives.to_vec();
    let mut labels = vec![1.0; positives.len()];
    mask.extend(picked.into_iter().map(|i| negatives[i]));
    labels.resize(mask.len(), 0.0);
    (mask, labels)
}

/// Training graph: labels from the reference tree, candidates are the
/// positives, k-NN pairs and any `extra` pairs.
pub fn init_adjacency_train(
    nodes: &[SkeletalPoint],
    tree: &NeuronTree,
    extra: &[Edge],
    cfg: &TrainGraphConfig,
) -> Result<SkeletonGraph> {
    let features = node_features(nodes)?;
    if tree.is_empty() {
        return Err(Error::Empty("reference tree is empty".into()));
    }
    let adjacency = tree_positives(nodes, tree, cfg.assign_margin);
    let positions: Vec<Point3> = nodes.iter().map(|p| p.position).collect();
    let mut cand: BTreeSet<Edge> = adjacency.iter().copied().collect();
    cand.extend(knn_edges(&positions, cfg.k_cand)?);
    cand.extend(
        extra
            .iter()
            .map(|&(a, b)| edge(a, b))
            .filter(|e| e.0 != e.1 && e.1 < nodes.len()),
    );
    let candidates: Vec<Edge> = cand.into_iter().collect();
    let (mask, mask_labels) = balanced_mask(&candidates, &adjacency, cfg.seed);
    Ok(SkeletonGraph {
        nodes: nodes.to_vec(),
        features,
        candidates,
        adjacency,
        mask,
        mask_labels,
    })
}

/// Length cap for inference candidates; `None` with fewer than two points.
pub fn edge_length_cap(positions: &[Point3]) -> Option<f64> {
    if positions.len() < 2 {
        return None;
    }
    let mut nn: Vec<f64> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| geom::dist2(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    geom::median(&mut nn).map(|m| EDGE_CAP_FACTOR * m)
}

/// Euclidean minimum spanning forest over pairs no longer than `cap`.
pub fn spanning_forest(positions: &[Point3], cap: f64) -> Vec<Edge> {
    let n = positions.len();
    let mut pairs: Vec<(f64, Edge)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = geom::dist(&positions[i], &positions[j]);
            if d <= cap {
                pairs.push((d, (i, j)));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sets = DisjointSets::new(n);
    let mut out: Vec<Edge> = pairs
        .into_iter()
        .filter(|&(_, (i, j))| sets.union(i, j))
        .map(|(_, e)| e)
        .collect();
    out.sort_unstable();
    out
}

/// Ground-truth-free graph: spanning forest as initial adjacency, forest
/// plus capped k-NN pairs as candidates.
pub fn init_adjacency_infer(nodes: &[SkeletalPoint], k_cand: usize) -> Result<SkeletonGraph> {
    let features = node_features(nodes)?;
    let positions: Vec<Point3> = nodes.iter().map(|p| p.position).collect();
    let (adjacency, candidates) = match edge_length_cap(&positions) {
        None => (Vec::new(), Vec::new()),
        Some(cap) => {
            let forest = spanning_forest(&positions, cap);
            let mut cand: BTreeSet<Edge> = forest.iter().copied().collect();
            cand.extend(
                knn_edges(&positions, k_cand)?
                    .into_iter()
                    .filter(|&(i, j)| geom::dist(&positions[i], &positions[j]) <= cap),
            );
            (forest, cand.into_iter().collect())
        }
    };
    Ok(SkeletonGraph {
        nodes: nodes.to_vec(),
        features,
        candidates,
        adjacency,
        mask: Vec::new(),
        mask_labels: Vec::new(),
    })
}

/// `D^-1/2 (A + I) D^-1/2` as a sparse matrix.
pub fn normalized_adjacency(n: usize, edges: &[Edge]) -> Result<SparseMatrix> {
    let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(shape_err("edge index out of range"));
        }
        if a != b {
            nbrs[a].insert(b);
            nbrs[b].insert(a);
        }
    }
    let deg: Vec<f64> = nbrs.iter().map(|s| s.len() as f64 + 1.0).collect();
    let entries = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = nbrs[i]
                .iter()
                .map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt()))
                .collect();
            row.push((i, 1.0 / deg[i]));
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(SparseMatrix {
        rows: n,
        cols: n,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeConfig {
    pub channels: Vec<usize>,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            channels: GCN_CHANNELS.to_vec(),
        }
    }
}

pub fn init_gae_params(input_dim: usize, cfg: &GaeConfig, seed: u64) -> Result<ParamStore> {
    if cfg.channels.is_empty() {
        return Err(invalid("GCN needs at least one layer"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut c_in = input_dim;
    for (l, &c) in cfg.channels.iter().enumerate() {
        let p = format!("gae.l{}", l + 1);
        store.insert_weight(&format!("{p}.w"), c_in, c, &mut rng)?;
        insert_batchnorm(&mut store, &format!("{p}.bn"), c)?;
        c_in = c;
    }
    // keep initial inner products moderate
    let last = format!("gae.l{}.bn.gamma", cfg.channels.len());
    store
        .get_mut(&last)
        .expect("just inserted")
        .value
        .data_mut()
        .fill(0.1);
    Ok(store)
}

/// GCN layers `BN(Â H W)` with ReLU on all but the last, plus identity
/// residuals where the width is unchanged. Batch statistics are taken over
/// the graph's nodes.
pub fn gcn_forward(
    s: &mut Session,
    x: Var,
    adj: Arc<SparseMatrix>,
    cfg: &GaeConfig,
) -> Result<Var> {
    let mut h = x;
    let last = cfg.channels.len() - 1;
    for l in 0..cfg.channels.len() {
        let p = format!("gae.l{}", l + 1);
        let w_in = s.g.value(h).cols();
        let m = s.g.spmm(adj.clone(), h)?;
        let y = s.linear(m, &p, false)?;
        let y = s.batchnorm(y, &format!("{p}.bn"), true)?;
        if l == last {
            h = y;
        } else {
            let y = s.g.relu(y);
            h = if w_in == cfg.channels[l] {
                s.g.add(y, h)?
            } else {
                y
            };
        }
    }
    Ok(h)
}

/// Inner-product decoder `Z Zᵀ`.
pub fn gae_reconstruct(z: &Tensor) -> Tensor {
    let (n, d) = (z.rows(), z.cols());
    Tensor::matrix(n, n, matmul_nt(z.data(), n, d, z.data(), n)).expect("square")
}

/// Masked mean binary cross-entropy on logits, computed directly.
pub fn similarity_loss_value(logits: &Tensor, pairs: &[Edge], labels: &[f64]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair mask is empty".into()));
    }
    if pairs.len() != labels.len() {
        return Err(shape_err("pair/label count mismatch"));
    }
    let s: f64 = pairs
        .iter()
        .zip(labels)
        .map(|(&(i, j), &y)| crate::diff::bce_with_logit(logits.at(i, j), y))
        .sum();
    Ok(s / pairs.len() as f64)
}

/// Candidate pairs whose link probability reaches `tau` in either direction.
pub fn extract_edges(logits: &Tensor, candidates: &[Edge], tau: f64) -> Vec<Edge> {
    let set: BTreeSet<Edge> = candidates
        .iter()
        .filter(|&&(i, j)| sigmoid(logits.at(i, j)) >= tau || sigmoid(logits.at(j, i)) >= tau)
        .map(|&(i, j)| edge(i, j))
        .collect();
    set.into_iter().collect()
}

/// One supervised link-prediction instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaeExample {
    pub features: Tensor,
    /// Adjacency fed to the encoder.
    pub input_edges: Vec<Edge>,
    pub pairs: Vec<Edge>,
    pub labels: Vec<f64>,
}

/// Forward pass to the masked loss.
pub fn gae_loss(s: &mut Session, ex: &GaeExample, cfg: &GaeConfig) -> Result<Var> {
    let adj = Arc::new(normalized_adjacency(ex.features.rows(), &ex.input_edges)?);
    let x = s.g.constant(ex.features.clone());
    let z = gcn_forward(s, x, adj, cfg)?;
    let a = s.g.gram(z)?;
    s.g.pair_bce(a, Arc::new(ex.pairs.clone()), Arc::new(ex.labels.clone()))
}

/// Link logits for every node pair.
pub fn predict_logits(
    store: &ParamStore,
    features: &Tensor,
    input_edges: &[Edge],
    cfg: &GaeConfig,
) -> Result<Tensor> {
    let mut s = Session::new(store, BnMode::Eval);
    let adj = Arc::new(normalized_adjacency(features.rows(), input_edges)?);
    let x = s.g.constant(features.clone());
    let z = gcn_forward(&mut s, x, adj, cfg)?;
    let z = s.g.value(z);
    if !z.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(gae_reconstruct(z))
}

/// Area under the ROC curve; ties count one half. `None` if either class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|x| *x.1)
        .map(|x| *x.0)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|x| !*x.1)
        .map(|x| *x.0)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut sorted_neg = neg.clone();
    sorted_neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for p in &pos {
        let below = sorted_neg.partition_point(|n| n < p);
        let tied = sorted_neg[below..].partition_point(|n| n <= p);
        wins += below as f64 + 0.5 * tied as f64;
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}
