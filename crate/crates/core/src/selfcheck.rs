//! Finite-difference checks of the two training losses on small seeded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::connectivity::{gae_loss, init_gae_params, GaeConfig, GaeExample};
use crate::diff::{finite_diff_check, BnMode, GradCheckReport, Session, Tensor};
use crate::encoder::{dgcnn_encode, init_skeleton_params, proposal_head, EncoderConfig};
use crate::error::Result;
use crate::skeleton::{skeleton_loss, LossConfig, PatchTargets};
use crate::swc::CenterlinePoint;
use crate::volume::{CloudPoint, Patch};

pub const GRADCHECK_TOL: f64 = 1e-3;
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_PROBES: usize = 32;
/// At the default step roughly half of all random instances put a ReLU or
/// max-pool kink, or a neighbor-set change, within one step of some probe.
/// This instance has none.
pub const GRADCHECK_SEED: u64 = 7;
pub const SKELETON_CHECK_POINTS: usize = 32;
pub const GAE_CHECK_NODES: usize = 10;

/// Points scattered around a short diagonal segment, with the segment's
/// centerline as reference.
fn check_patch(rng: &mut ChaCha8Rng) -> (Patch, Vec<CenterlinePoint>) {
    let points = (0..SKELETON_CHECK_POINTS)
        .map(|i| {
            let t = i as f64 * 0.4;
            CloudPoint {
                position: [
                    10.0 + t + rng.random_range(-1.5..1.5),
                    10.0 + 0.5 * t + rng.random_range(-1.5..1.5),
                    10.0 + rng.random_range(-1.5..1.5),
                ],
                intensity: rng.random_range(0.3..1.0),
            }
        })
        .collect();
    let reference = (0..14)
        .map(|i| CenterlinePoint {
            position: [10.0 + i as f64, 10.0 + 0.5 * i as f64, 10.0],
            radius: 1.0 + 0.1 * i as f64,
        })
        .collect();
    let patch = Patch {
        points,
        source: (0..SKELETON_CHECK_POINTS).collect(),
        augmentation: None,
    };
    (patch, reference)
}

/// Skeleton loss through the full encoder and head on a 32-point patch.
pub fn skeleton_gradcheck(
    cfg: &EncoderConfig,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (patch, reference) = check_patch(&mut rng);
    let targets = PatchTargets {
        centers: reference.iter().map(|c| c.position).collect(),
        reference,
        offset_rows: None,
    };
    let mut store = init_skeleton_params(cfg, seed)?;
    let loss_cfg = LossConfig::default();
    finite_diff_check(&mut store, probes, step, seed, |st, want| {
        let mut s = Session::new(st, BnMode::TrainFrozen);
        let fmap = dgcnn_encode(&mut s, &patch, cfg)?;
        let out = proposal_head(&mut s, &fmap, cfg)?;
        let loss = skeleton_loss(&mut s, &out, &targets, &loss_cfg)?.total;
        let v = s.g.value(loss).item();
        Ok((v, if want { Some(s.gradients(loss)?) } else { None }))
    })
}

/// Masked link loss through the full GCN stack on a 10-node graph.
pub fn gae_gradcheck(
    cfg: &GaeConfig,
    input_dim: usize,
    probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = GAE_CHECK_NODES;
    let features = Tensor::matrix(
        n,
        input_dim,
        (0..n * input_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let input_edges: Vec<_> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b));
            labels.push(if input_edges.contains(&(a, b)) {
                1.0
            } else {
                0.0
            });
        }
    }
    let ex = GaeExample {
        features,
        input_edges,
        pairs,
        labels,
    };
    let mut store = init_gae_params(input_dim, cfg, seed)?;
    finite_diff_check(&mut store, probes, step, seed, |st, want| {
        let mut s = Session::new(st, BnMode::TrainFrozen);
        let loss = gae_loss(&mut s, &ex, cfg)?;
        let v = s.g.value(loss).item();
        Ok((v, if want { Some(s.gradients(loss)?) } else { None }))
    })
}
