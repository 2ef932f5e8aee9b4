//! Two-stage training, model files and the end-to-end tracing pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{
    self, balanced_mask, edge_length_cap, extract_edges, init_adjacency_infer,
    init_adjacency_train, init_gae_params, predict_logits, rotate_node_positions, spanning_forest,
    Edge, GaeConfig, GaeExample, TrainGraphConfig, DEFAULT_K_CAND, DEFAULT_TAU,
};
use crate::diff::{load_weights, save_weights, AdamConfig, BnMode, ParamStore, Session};
use crate::encoder::{
    dgcnn_encode, init_skeleton_params, predict_proposals, proposal_head, EncoderConfig,
};
use crate::error::{invalid, Error, Result};
use crate::geom::{self, Point3};
use crate::metrics::{self, MetricReport};
use crate::refine::{
    bridge_gaps, build_swc, remove_spurs, ReconGraph, DEFAULT_GAP_DIST, DEFAULT_SPUR_LEN,
};
use crate::skeleton::{
    aggregate_windows, fps_downsample, skeleton_loss, uniform_downsample, LossConfig, NmsConfig,
    PatchTargets, SkeletalPoint,
};
use crate::swc::{parse_swc, resample_edges, CenterlinePoint, NeuronTree};
use crate::synth::read_dataset;
use crate::volume::{
    make_training_patch, read_volume, sliding_windows, voxel_to_points, NeuronPointCloud, Patch,
    Volume, DEFAULT_PATCH_POINTS, DEFAULT_THETA,
};

pub const SKELETON_LR: f64 = 1e-3;
pub const CONNECTIVITY_LR: f64 = 5e-4;
pub const SKELETON_EPOCHS: usize = 200;
pub const CONNECTIVITY_EPOCHS: usize = 100;
pub const CHECKPOINT_EVERY: usize = 25;
/// Chamfer targets are reference points within `max(r, 1) + margin` of the patch.
pub const TARGET_MARGIN: f64 = 1.0;
/// Skeletal points farther than this past a reference tube get no training links.
pub const ASSIGN_MARGIN: f64 = 2.0;

pub const SKELETON_FILE: &str = "skeleton.pnwt";
pub const MODEL_FILE: &str = "model.pnwt";
pub const SKELETON_HISTORY: &str = "history.csv";
pub const CONNECTIVITY_HISTORY: &str = "connectivity_history.csv";

/// How skeletal points are chosen from the pooled proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Nms,
    /// Farthest point sampling down to the count suppression would keep.
    Fps,
    /// Seeded uniform sampling down to the count suppression would keep.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub theta: f64,
    pub n_p: usize,
    pub encoder: EncoderConfig,
    pub gae: GaeConfig,
    pub nms: NmsConfig,
    pub sampler: Sampler,
    pub k_cand: usize,
    pub tau: f64,
    pub spur_len: f64,
    pub gap_dist: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            n_p: DEFAULT_PATCH_POINTS,
            encoder: EncoderConfig::default(),
            gae: GaeConfig::default(),
            nms: NmsConfig::default(),
            sampler: Sampler::Nms,
            k_cand: DEFAULT_K_CAND,
            tau: DEFAULT_TAU,
            spur_len: DEFAULT_SPUR_LEN,
            gap_dist: DEFAULT_GAP_DIST,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub pipeline: PipelineConfig,
}

impl TrainConfig {
    pub fn skeleton() -> Self {
        Self {
            lr: SKELETON_LR,
            epochs: SKELETON_EPOCHS,
            seed: 0,
            augment: true,
            checkpoint_every: CHECKPOINT_EVERY,
            loss: LossConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn connectivity() -> Self {
        Self {
            lr: CONNECTIVITY_LR,
            epochs: CONNECTIVITY_EPOCHS,
            ..Self::skeleton()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.pipeline.n_p <= self.pipeline.encoder.k {
            return Err(invalid("patch size must exceed the neighbor count"));
        }
        if !(0.0..1.0).contains(&self.pipeline.theta) {
            return Err(invalid("theta must lie in [0, 1)"));
        }
        self.pipeline.nms.validate()
    }
}

/// SplitMix64 finalizer over a few words, for per-step seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// A training volume with its reference tree.
#[derive(Debug, Clone)]
pub struct TrainingVolume {
    pub cloud: NeuronPointCloud,
    pub tree: NeuronTree,
    /// Reference centerline sampled about one voxel apart.
    pub reference: Vec<CenterlinePoint>,
}

impl TrainingVolume {
    pub fn new(volume: &Volume, tree: NeuronTree, theta: f64) -> Result<Self> {
        let cloud = voxel_to_points(volume, theta)?;
        if cloud.is_empty() {
            return Err(Error::Empty("training volume has no foreground".into()));
        }
        let reference = resample_edges(&tree, 1.0)?;
        if reference.is_empty() {
            return Err(Error::Empty("reference tree is empty".into()));
        }
        Ok(Self {
            cloud,
            tree,
            reference,
        })
    }
}

pub fn load_training_set(dir: &Path, theta: f64) -> Result<Vec<TrainingVolume>> {
    read_dataset(dir)?
        .into_iter()
        .map(|(vol, swc)| {
            let v = read_volume(&read_file(&vol)?)?;
            let t = parse_swc(&read_file(&swc)?)?;
            TrainingVolume::new(&v, t, theta)
        })
        .collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

/// Supervision for a patch, in patch coordinates. Chamfer targets are the
/// reference points within reach of some patch point and the offset term
/// covers the patch points within reach of some reference point, reach
/// being `max(r, 1) + TARGET_MARGIN`.
pub fn local_targets(patch: &Patch, reference: &[CenterlinePoint]) -> PatchTargets {
    let moved: Vec<CenterlinePoint> = reference
        .iter()
        .map(|c| CenterlinePoint {
            position: patch
                .augmentation
                .map_or(c.position, |a| a.apply(&c.position)),
            radius: c.radius,
        })
        .collect();
    let reach = |c: &CenterlinePoint| c.radius.max(1.0) + TARGET_MARGIN;
    let pts = patch.positions();
    let near = |c: &CenterlinePoint, p: &Point3| geom::dist2(&c.position, p) <= reach(c).powi(2);
    let centers = moved
        .iter()
        .filter(|c| pts.iter().any(|p| near(c, p)))
        .map(|c| c.position)
        .collect();
    let rows = (0..pts.len())
        .filter(|&i| moved.iter().any(|c| near(c, &pts[i])))
        .collect();
    PatchTargets {
        centers,
        reference: moved,
        offset_rows: Some(rows),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParamStore,
    /// Mean loss per epoch.
    pub history: Vec<f64>,
}

/// Loss of one skeleton step; gradients and running-stat updates when `train`.
fn skeleton_step(
    store: &ParamStore,
    patch: &Patch,
    vol: &TrainingVolume,
    cfg: &TrainConfig,
    mode: BnMode,
) -> Result<(
    f64,
    Option<(crate::diff::Gradients, Vec<(String, crate::diff::Tensor)>)>,
)> {
    let mut s = Session::new(store, mode);
    let fmap = dgcnn_encode(&mut s, patch, &cfg.pipeline.encoder)?;
    let out = proposal_head(&mut s, &fmap, &cfg.pipeline.encoder)?;
    let targets = local_targets(patch, &vol.reference);
    let loss = skeleton_loss(&mut s, &out, &targets, &cfg.loss)?;
    let value = s.g.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("skeleton loss".into()));
    }
    let grads = s.gradients(loss.total)?;
    let updates = s.take_bn_updates();
    Ok((value, Some((grads, updates))))
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", e + 1, l));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Skeleton stage: one random patch per volume per epoch, one Adam step per
/// patch. With `out_dir`, writes checkpoints and the loss history there.
pub fn train_skeleton(
    volumes: &[TrainingVolume],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Empty("no training volumes".into()));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let mut store = init_skeleton_params(&cfg.pipeline.encoder, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (v, vol) in volumes.iter().enumerate() {
            let seed = mix_seed(&[cfg.seed, epoch as u64, v as u64]);
            let patch = make_training_patch(&vol.cloud, cfg.pipeline.n_p, seed, cfg.augment)?;
            let (value, parts) = skeleton_step(&store, &patch, vol, cfg, BnMode::Train)?;
            let (grads, updates) = parts.expect("training step returns gradients");
            store.accumulate(&grads)?;
            store.apply_updates(updates)?;
            store.adam_step(&adam)?;
            total += value;
        }
        history.push(total / volumes.len() as f64);
        log::info!("skeleton epoch {} loss {:.4}", epoch + 1, history[epoch]);
        if let Some(d) = out_dir {
            if (epoch + 1) % cfg.checkpoint_every.max(1) == 0 || epoch + 1 == cfg.epochs {
                fs::write(d.join(SKELETON_FILE), save_weights(&store)?)?;
                write_history(&d.join(SKELETON_HISTORY), &history)?;
            }
        }
    }
    Ok(TrainOutcome { store, history })
}

/// Proposals of every window, in window order.
pub fn window_proposals(
    store: &ParamStore,
    cloud: &NeuronPointCloud,
    cfg: &PipelineConfig,
) -> Result<Vec<Vec<SkeletalPoint>>> {
    sliding_windows(cloud, cfg.n_p)?
        .into_iter()
        .map(|w| {
            let patch = Patch::from_indices(cloud, w);
            Ok(predict_proposals(store, &patch, &cfg.encoder, BnMode::Eval)?.skeletal_points())
        })
        .collect()
}

/// Skeletal points of a whole cloud using the configured sampler.
pub fn infer_skeleton(
    store: &ParamStore,
    cloud: &NeuronPointCloud,
    cfg: &PipelineConfig,
) -> Result<Vec<SkeletalPoint>> {
    let windows = window_proposals(store, cloud, cfg)?;
    let kept = aggregate_windows(&windows, &cfg.nms)?;
    if cfg.sampler == Sampler::Nms {
        return Ok(kept);
    }
    let pool: Vec<SkeletalPoint> = windows
        .into_iter()
        .flatten()
        .filter(|p| p.score >= cfg.nms.score_threshold)
        .collect();
    let m = kept.len().min(pool.len());
    let picked = match cfg.sampler {
        Sampler::Fps => {
            let pos: Vec<Point3> = pool.iter().map(|p| p.position).collect();
            let scores: Vec<f64> = pool.iter().map(|p| p.score).collect();
            fps_downsample(&pos, &scores, m)?
        }
        _ => uniform_downsample(pool.len(), m, cfg.seed)?,
    };
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Frozen skeleton and its initializer forest for one training volume.
#[derive(Debug, Clone)]
pub struct ConnectivitySample {
    pub graph: connectivity::SkeletonGraph,
    pub forest: Vec<Edge>,
}

/// Builds the training graph for one volume from frozen skeleton inference.
pub fn connectivity_sample(
    skeleton: &ParamStore,
    vol: &TrainingVolume,
    cfg: &TrainConfig,
) -> Result<Option<ConnectivitySample>> {
    let points = infer_skeleton(skeleton, &vol.cloud, &cfg.pipeline)?;
    if points.len() < 2 {
        return Ok(None);
    }
    let positions: Vec<Point3> = points.iter().map(|p| p.position).collect();
    let forest =
        edge_length_cap(&positions).map_or(Vec::new(), |cap| spanning_forest(&positions, cap));
    let gcfg = TrainGraphConfig {
        k_cand: cfg.pipeline.k_cand,
        assign_margin: ASSIGN_MARGIN,
        seed: cfg.seed,
    };
    let graph = init_adjacency_train(&points, &vol.tree, &forest, &gcfg)?;
    if graph.adjacency.is_empty() {
        return Ok(None);
    }
    Ok(Some(ConnectivitySample { graph, forest }))
}

/// Trains the auto-encoder on fixed examples, resampling negatives each
/// epoch and, with `augment`, applying a random rotation to the node
/// positions. Returns the parameters and per-epoch mean loss.
pub fn train_gae(
    samples: &[ConnectivitySample],
    cfg: &TrainConfig,
    input_dim: usize,
    out_dir: Option<(&Path, &ParamStore)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no usable connectivity examples".into()));
    }
    let mut store = init_gae_params(input_dim, &cfg.pipeline.gae, mix_seed(&[cfg.seed, 1]))?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (i, sample) in samples.iter().enumerate() {
            let g = &sample.graph;
            let step_seed = mix_seed(&[cfg.seed, epoch as u64, i as u64]);
            let (pairs, labels) = balanced_mask(&g.candidates, &g.adjacency, step_seed);
            let features = if cfg.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
                rotate_node_positions(&g.features, &geom::random_rotation(&mut rng))?
            } else {
                g.features.clone()
            };
            let ex = GaeExample {
                features,
                input_edges: sample.forest.clone(),
                pairs,
                labels,
            };
            let mut s = Session::new(&store, BnMode::Train);
            let loss = connectivity::gae_loss(&mut s, &ex, &cfg.pipeline.gae)?;
            let value = s.g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("similarity loss".into()));
            }
            let grads = s.gradients(loss)?;
            let updates = s.take_bn_updates();
            store.accumulate(&grads)?;
            store.apply_updates(updates)?;
            store.adam_step(&adam)?;
            total += value;
        }
        history.push(total / samples.len() as f64);
        log::info!(
            "connectivity epoch {} loss {:.4}",
            epoch + 1,
            history[epoch]
        );
        if let Some((d, skeleton)) = out_dir {
            if (epoch + 1) % cfg.checkpoint_every.max(1) == 0 || epoch + 1 == cfg.epochs {
                fs::write(d.join(MODEL_FILE), save_weights(&skeleton.merged(&store)?)?)?;
                write_history(&d.join(CONNECTIVITY_HISTORY), &history)?;
            }
        }
    }
    Ok(TrainOutcome { store, history })
}

/// Connectivity stage with the skeleton parameters frozen.
pub fn train_connectivity(
    skeleton: &ParamStore,
    volumes: &[TrainingVolume],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::Empty("no training volumes".into()));
    }
    let before = frozen_digest(skeleton);
    let mut samples = Vec::new();
    for vol in volumes {
        if let Some(s) = connectivity_sample(skeleton, vol, cfg)? {
            samples.push(s);
        }
    }
    let input_dim = samples.first().map_or(0, |s| s.graph.features.cols());
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    let out = train_gae(&samples, cfg, input_dim, out_dir.map(|d| (d, skeleton)))?;
    if frozen_digest(skeleton) != before {
        return Err(Error::Structure(
            "skeleton parameters changed during connectivity training".into(),
        ));
    }
    Ok(out)
}

/// Digest of the skeleton-stage parameters.
pub fn frozen_digest(store: &ParamStore) -> String {
    format!("{}:{}", store.digest("encoder."), store.digest("head."))
}

/// Trained skeleton and connectivity parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub skeleton: ParamStore,
    pub gae: ParamStore,
}

impl Model {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let all = load_weights(bytes)?;
        let skeleton = all.subset("encoder.").merged(&all.subset("head."))?;
        let gae = all.subset("gae.");
        if skeleton.is_empty() || gae.is_empty() {
            return Err(Error::Format(
                "model file needs skeleton and connectivity parameters".into(),
            ));
        }
        Ok(Self { skeleton, gae })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        save_weights(&self.skeleton.merged(&self.gae)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Volume to reconstructed tree.
pub fn trace(model: &Model, volume: &Volume, cfg: &PipelineConfig) -> Result<NeuronTree> {
    let cloud = voxel_to_points(volume, cfg.theta)?;
    if cloud.is_empty() {
        return Err(Error::Empty(format!(
            "no voxels above theta={}; lower --theta",
            cfg.theta
        )));
    }
    if cloud.len() <= cfg.encoder.k {
        return Err(Error::Empty(format!(
            "only {} foreground points, need more than k={}; lower --theta",
            cloud.len(),
            cfg.encoder.k
        )));
    }
    let points = infer_skeleton(&model.skeleton, &cloud, cfg)?;
    if points.is_empty() {
        return Err(Error::Empty("no skeletal points survived selection".into()));
    }
    let graph = init_adjacency_infer(&points, cfg.k_cand)?;
    let edges = if graph.candidates.is_empty() {
        Vec::new()
    } else {
        let logits = predict_logits(&model.gae, &graph.features, &graph.adjacency, &cfg.gae)?;
        extract_edges(&logits, &graph.candidates, cfg.tau)
    };
    let recon = ReconGraph::new(points, &edges)?;
    let recon = bridge_gaps(&recon, cfg.gap_dist)?;
    let recon = remove_spurs(&recon, cfg.spur_len)?;
    build_swc(&recon)
}

/// Scores of `pred` against `gt` at unit spacing.
pub fn score(pred: &NeuronTree, gt: &NeuronTree, d_thr: f64, d_match: f64) -> Result<MetricReport> {
    metrics::evaluate(pred, gt, metrics::DEFAULT_SPACING, d_thr, d_match)
}

/// Paths written by the file-based training entry points.
pub fn stage_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(SKELETON_FILE), out_dir.join(MODEL_FILE))
}
