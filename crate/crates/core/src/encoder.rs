//! Dynamic-graph EdgeConv encoder and the center-proposal head.
//!
//! Parameters live under `encoder.*` and `head.*`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{insert_batchnorm, softplus, BnMode, ParamStore, Session, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geom::Point3;
use crate::par::{self, Exec};
use crate::volume::Patch;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_K: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Neighbors per point in every EdgeConv block.
    pub k: usize,
    /// Output width of each EdgeConv block.
    pub edge_channels: Vec<usize>,
    /// Width `F` of the fused geometric feature.
    pub feature_dim: usize,
    /// Hidden widths of the proposal head (the 6-wide output layer is implied).
    pub head_hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            edge_channels: vec![64, 64, 64],
            feature_dim: 64,
            head_hidden: vec![128, 64],
        }
    }
}

pub const INPUT_CHANNELS: usize = 4;
pub const PROPOSAL_CHANNELS: usize = 6;

/// Exact k-nearest-neighbor table: row `i` lists `k` indices (never `i`
/// itself) by ascending distance, ties broken by ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// k-NN over rows of a row-major `[n, dim]` feature matrix.
pub fn knn_graph(features: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    knn_graph_with(Exec::default(), features, dim, k)
}

pub fn knn_graph_with(exec: Exec, features: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(invalid("feature length is not a multiple of the dimension"));
    }
    let n = features.len() / dim;
    if n <= k {
        return Err(invalid(format!(
            "k-NN needs more than k={k} points, got {n}"
        )));
    }
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    let rows = par::map_range(exec, n, |i| {
        let fi = &features[i * dim..(i + 1) * dim];
        let mut keyed: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let fj = &features[j * dim..(j + 1) * dim];
                let d: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, j)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < keyed.len() {
            keyed.select_nth_unstable_by(k - 1, cmp);
            keyed.truncate(k);
        }
        keyed.sort_unstable_by(cmp);
        keyed.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok(KnnGraph {
        k,
        neighbors: rows.concat(),
    })
}

pub fn knn_graph_points(points: &[Point3], k: usize) -> Result<KnnGraph> {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    knn_graph(&flat, 3, k)
}

/// Registers every encoder and head parameter.
pub fn init_skeleton_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut c_in = INPUT_CHANNELS;
    for (b, &c_out) in cfg.edge_channels.iter().enumerate() {
        let p = format!("encoder.ec{}", b + 1);
        store.insert_weight(&format!("{p}.w"), 2 * c_in, c_out, &mut rng)?;
        insert_batchnorm(&mut store, &format!("{p}.bn"), c_out)?;
        c_in = c_out;
    }
    let cat: usize = cfg.edge_channels.iter().sum();
    store.insert_weight("encoder.fuse.w", cat, cfg.feature_dim, &mut rng)?;
    insert_batchnorm(&mut store, "encoder.fuse.bn", cfg.feature_dim)?;

    let mut c_in = cfg.feature_dim;
    for (l, &h) in cfg.head_hidden.iter().enumerate() {
        let p = format!("head.l{}", l + 1);
        store.insert_weight(&format!("{p}.w"), c_in, h, &mut rng)?;
        insert_batchnorm(&mut store, &format!("{p}.bn"), h)?;
        c_in = h;
    }
    store.insert_weight("head.out.w", c_in, PROPOSAL_CHANNELS, &mut rng)?;
    // start with small offsets so early proposals stay near their points
    for w in store
        .get_mut("head.out.w")
        .expect("just inserted")
        .value
        .data_mut()
    {
        *w *= 0.1;
    }
    store.insert("head.out.b", Tensor::zeros(&[PROPOSAL_CHANNELS]), true)?;
    Ok(store)
}

/// Scale applied to centered input coordinates.
pub const COORD_SCALE: f64 = 0.1;

/// Network input rows `(x, y, z, I)` with coordinates taken relative to the
/// patch bounding-box center and scaled by [`COORD_SCALE`].
pub fn input_features(patch: &Patch) -> Tensor {
    let pos = patch.positions();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pos {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let mut data = Vec::with_capacity(pos.len() * INPUT_CHANNELS);
    for (p, q) in pos.iter().zip(&patch.points) {
        data.extend_from_slice(&[
            (p[0] - center[0]) * COORD_SCALE,
            (p[1] - center[1]) * COORD_SCALE,
            (p[2] - center[2]) * COORD_SCALE,
            q.intensity,
        ]);
    }
    Tensor::matrix(pos.len(), INPUT_CHANNELS, data).expect("consistent shape")
}

/// One EdgeConv block: shared linear map on `[x_i, x_j - x_i]`, batch
/// normalization, LeakyReLU, then max over the `k` neighbors.
pub fn edgeconv_forward(s: &mut Session, x: Var, graph: &KnnGraph, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.w"))?;
    let e =
        s.g.edge_linear(x, w, Arc::new(graph.neighbors.clone()), graph.k)?;
    let e = s.batchnorm(e, &format!("{prefix}.bn"), false)?;
    let e = s.g.leaky_relu(e, LEAKY_SLOPE);
    s.g.neighborhood_max(e, graph.k)
}

/// Per-point geometric features plus the untouched input coordinates.
pub struct GeometricFeatureMap {
    pub features: Var,
    pub coordinates: Vec<Point3>,
    /// Graphs used by each EdgeConv block, in order.
    pub graphs: Vec<KnnGraph>,
}

pub fn dgcnn_encode(
    s: &mut Session,
    patch: &Patch,
    cfg: &EncoderConfig,
) -> Result<GeometricFeatureMap> {
    let coordinates = patch.positions();
    let x0 = s.g.constant(input_features(patch));
    let mut graph = knn_graph_points(&coordinates, cfg.k)?;
    let mut graphs = Vec::with_capacity(cfg.edge_channels.len());
    let mut h = x0;
    let mut blocks = Vec::with_capacity(cfg.edge_channels.len());
    for b in 0..cfg.edge_channels.len() {
        if b > 0 {
            let feats = s.g.value(h);
            graph = knn_graph(feats.data(), feats.cols(), cfg.k)?;
        }
        h = edgeconv_forward(s, h, &graph, &format!("encoder.ec{}", b + 1))?;
        graphs.push(graph.clone());
        blocks.push(h);
    }
    let cat = s.g.concat(&blocks)?;
    let f = s.linear(cat, "encoder.fuse", false)?;
    let f = s.batchnorm(f, "encoder.fuse.bn", false)?;
    let features = s.g.leaky_relu(f, LEAKY_SLOPE);
    Ok(GeometricFeatureMap {
        features,
        coordinates,
        graphs,
    })
}

/// Graph handles for the proposal head outputs.
pub struct ProposalVars {
    pub logits: Var,
    pub radius: Var,
    pub offsets: Var,
    pub moved: Var,
}

pub fn proposal_head(
    s: &mut Session,
    fmap: &GeometricFeatureMap,
    cfg: &EncoderConfig,
) -> Result<ProposalVars> {
    let mut h = fmap.features;
    for l in 0..cfg.head_hidden.len() {
        let p = format!("head.l{}", l + 1);
        h = s.linear(h, &p, false)?;
        h = s.batchnorm(h, &format!("{p}.bn"), false)?;
        h = s.g.leaky_relu(h, LEAKY_SLOPE);
    }
    let out = s.linear(h, "head.out", true)?;
    let logits = s.g.slice_cols(out, 0, 2)?;
    let raw_r = s.g.slice_cols(out, 2, 1)?;
    let radius = s.g.softplus(raw_r);
    let offsets = s.g.slice_cols(out, 3, 3)?;
    let n = fmap.coordinates.len();
    let coords = Tensor::matrix(
        n,
        3,
        fmap.coordinates
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect(),
    )?;
    let coords = s.g.constant(coords);
    let moved = s.g.add(coords, offsets)?;
    Ok(ProposalVars {
        logits,
        radius,
        offsets,
        moved,
    })
}

/// Foreground probability from two objectness logits.
pub fn foreground_prob(logits: [f64; 2]) -> f64 {
    // softmax(l)[1] = σ(l1 - l0)
    crate::diff::sigmoid(logits[1] - logits[0])
}

/// Materialized proposals for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub source: Vec<Point3>,
    pub offsets: Vec<Point3>,
    pub moved: Vec<Point3>,
    pub logits: Vec<[f64; 2]>,
    pub radius: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.moved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moved.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| foreground_prob(l)).collect()
    }
}

fn rows3(t: &Tensor) -> Vec<Point3> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Forward pass producing plain proposal values.
pub fn predict_proposals(
    store: &ParamStore,
    patch: &Patch,
    cfg: &EncoderConfig,
    mode: BnMode,
) -> Result<ProposalSet> {
    let mut s = Session::new(store, mode);
    let fmap = dgcnn_encode(&mut s, patch, cfg)?;
    let out = proposal_head(&mut s, &fmap, cfg)?;
    let feats = s.g.value(fmap.features);
    let logits =
        s.g.value(out.logits)
            .data()
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
    Ok(ProposalSet {
        source: fmap.coordinates.clone(),
        offsets: rows3(s.g.value(out.offsets)),
        moved: rows3(s.g.value(out.moved)),
        logits,
        radius: s.g.value(out.radius).data().to_vec(),
        features: (0..feats.rows()).map(|r| feats.row(r).to_vec()).collect(),
    })
}

/// Radius from the raw head output, kept for callers that need it outside a graph.
pub fn radius_from_raw(raw: f64) -> f64 {
    softplus(raw)
}
