//! Proposal losses and skeletal point selection.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{CustomOp, Session, Tensor, Var};
use crate::encoder::{ProposalSet, ProposalVars};
use crate::error::{invalid, Error, Result};
use crate::geom::{self, Point3};
use crate::swc::CenterlinePoint;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_IOU: f64 = 0.15;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const R_MIN: f64 = 1.0;

/// Index of the nearest point in `set` for every query; ties go to the lower index.
fn nearest_all(queries: &[Point3], set: &[Point3]) -> Vec<usize> {
    queries
        .iter()
        .map(|q| geom::nearest(q, set).expect("non-empty set").0)
        .collect()
}

/// Symmetric squared Chamfer distance in sum form.
pub fn chamfer_sum(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer distance of an empty set".into()));
    }
    let ab: f64 = nearest_all(a, b)
        .iter()
        .zip(a)
        .map(|(&j, p)| geom::dist2(p, &b[j]))
        .sum();
    let ba: f64 = nearest_all(b, a)
        .iter()
        .zip(b)
        .map(|(&i, q)| geom::dist2(q, &a[i]))
        .sum();
    Ok(ab + ba)
}

struct ChamferOp {
    targets: Arc<Vec<Point3>>,
    /// Input row of each compared point.
    rows: Vec<usize>,
    nn_pred: Vec<usize>,
    nn_target: Vec<usize>,
}

impl CustomOp for ChamferOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = grad.item();
        let mut out = Tensor::zeros(x.shape());
        let d = out.data_mut();
        let xd = x.data();
        for (i, &j) in self.nn_pred.iter().enumerate() {
            let r = self.rows[i];
            for a in 0..3 {
                d[r * 3 + a] += 2.0 * g * (xd[r * 3 + a] - self.targets[j][a]);
            }
        }
        for (j, &i) in self.nn_target.iter().enumerate() {
            let r = self.rows[i];
            for a in 0..3 {
                d[r * 3 + a] += 2.0 * g * (xd[r * 3 + a] - self.targets[j][a]);
            }
        }
        vec![Some(out)]
    }
}

/// Chamfer loss between the `[n, 3]` rows of `moved` and fixed targets.
/// With `rows`, only those rows are compared and the rest get no gradient.
pub fn chamfer_loss(
    s: &mut Session,
    moved: Var,
    targets: &[Point3],
    rows: Option<&[usize]>,
) -> Result<Var> {
    let x = s.g.value(moved);
    if x.cols() != 3 || x.shape().len() != 2 {
        return Err(crate::error::shape_err("chamfer input must be [n, 3]"));
    }
    let rows: Vec<usize> = match rows {
        Some(r) if r.iter().any(|&i| i >= x.rows()) => {
            return Err(invalid("chamfer row out of range"))
        }
        Some(r) => r.to_vec(),
        None => (0..x.rows()).collect(),
    };
    let pts: Vec<Point3> = rows
        .iter()
        .map(|&i| {
            let c = x.row(i);
            [c[0], c[1], c[2]]
        })
        .collect();
    let value = chamfer_sum(&pts, targets)?;
    let op = ChamferOp {
        targets: Arc::new(targets.to_vec()),
        nn_pred: nearest_all(&pts, targets),
        nn_target: nearest_all(targets, &pts),
        rows,
    };
    Ok(s.g.custom(&[moved], Tensor::scalar(value), Box::new(op)))
}

/// 1 where a moved point lies inside some reference sphere of radius
/// `max(r_j, r_min)`, else 0.
pub fn objectness_labels(
    moved: &[Point3],
    reference: &[CenterlinePoint],
    r_min: f64,
) -> Vec<usize> {
    moved
        .iter()
        .map(|p| {
            reference.iter().any(|n| {
                let r = n.radius.max(r_min);
                geom::dist2(p, &n.position) <= r * r
            }) as usize
        })
        .collect()
}

/// Radius of the reference node nearest to each moved point.
pub fn radius_targets(moved: &[Point3], reference: &[CenterlinePoint]) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::Empty("no reference nodes".into()));
    }
    let pos: Vec<Point3> = reference.iter().map(|n| n.position).collect();
    Ok(nearest_all(moved, &pos)
        .into_iter()
        .map(|j| reference[j].radius)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub use_offsets: bool,
    pub use_objectness: bool,
    pub r_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            use_offsets: true,
            use_objectness: true,
            r_min: R_MIN,
        }
    }
}

/// Supervision for one patch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchTargets {
    /// Chamfer targets.
    pub centers: Vec<Point3>,
    /// Reference nodes for objectness labels and radius targets.
    pub reference: Vec<CenterlinePoint>,
    /// Rows that take part in the offset term; every row when `None`.
    pub offset_rows: Option<Vec<usize>>,
}

pub struct SkeletonLoss {
    pub total: Var,
    pub offsets: Option<Var>,
    pub objectness: Option<Var>,
    pub radius: Var,
}

/// `L_off + λ·L_obj + L_rad`.
///
/// The offset term is dropped when there are no Chamfer targets or no offset
/// rows. Labels and radius targets come from the reference nodes at the
/// current proposal positions and are held constant.
pub fn skeleton_loss(
    s: &mut Session,
    out: &ProposalVars,
    targets: &PatchTargets,
    cfg: &LossConfig,
) -> Result<SkeletonLoss> {
    let moved: Vec<Point3> =
        s.g.value(out.moved)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
    let reference = &targets.reference;
    let rows = targets.offset_rows.as_deref();
    let mut terms = Vec::new();
    let offsets =
        if cfg.use_offsets && !targets.centers.is_empty() && rows.is_none_or(|r| !r.is_empty()) {
            let v = chamfer_loss(s, out.moved, &targets.centers, rows)?;
            terms.push((v, 1.0));
            Some(v)
        } else {
            None
        };
    let objectness = if cfg.use_objectness {
        let labels = objectness_labels(&moved, reference, cfg.r_min);
        let logp = s.g.log_softmax(out.logits);
        let v = s.g.nll_mean(logp, Arc::new(labels))?;
        terms.push((v, cfg.lambda));
        Some(v)
    } else {
        None
    };
    let radius =
        s.g.l1_mean(out.radius, Arc::new(radius_targets(&moved, reference)?))?;
    terms.push((radius, 1.0));
    let total = s.g.lin_comb(&terms)?;
    Ok(SkeletonLoss {
        total,
        offsets,
        objectness,
        radius,
    })
}

/// Closed-form intersection over union of two balls.
pub fn sphere_iou(c1: &Point3, r1: f64, c2: &Point3, r2: f64) -> Result<f64> {
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(invalid("sphere radii must be positive"));
    }
    Ok(sphere_iou_unchecked(c1, r1, c2, r2))
}

fn sphere_iou_unchecked(c1: &Point3, r1: f64, c2: &Point3, r2: f64) -> f64 {
    use std::f64::consts::PI;
    let d = geom::dist(c1, c2);
    if d >= r1 + r2 {
        return 0.0;
    }
    let v1 = 4.0 / 3.0 * PI * r1.powi(3);
    let v2 = 4.0 / 3.0 * PI * r2.powi(3);
    if d <= (r1 - r2).abs() {
        return v1.min(v2) / v1.max(v2);
    }
    let s = r1 + r2 - d;
    let lens = PI * s * s * (d * d + 2.0 * d * (r1 + r2) - 3.0 * (r1 - r2).powi(2)) / (12.0 * d);
    lens / (v1 + v2 - lens)
}

/// A selected skeleton node candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletalPoint {
    pub position: Point3,
    pub radius: f64,
    pub score: f64,
    pub feature: Vec<f64>,
}

impl ProposalSet {
    /// Every proposal as a skeletal point carrying its source feature.
    pub fn skeletal_points(&self) -> Vec<SkeletalPoint> {
        self.scores()
            .into_iter()
            .enumerate()
            .map(|(i, score)| SkeletalPoint {
                position: self.moved[i],
                radius: self.radius[i],
                score,
                feature: self.features[i].clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.05..=0.25).contains(&self.iou_threshold) {
            return Err(invalid(format!(
                "IoU threshold {} outside [0.05, 0.25]",
                self.iou_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(invalid("score threshold outside [0, 1]"));
        }
        Ok(())
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn by_score(points: &[SkeletalPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].score.total_cmp(&points[a].score).then(a.cmp(&b)));
    order
}

/// Greedy spherical non-maximum suppression. Returns kept indices in
/// selection order.
pub fn spherical_nms(points: &[SkeletalPoint], cfg: &NmsConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if points.iter().any(|p| !(p.radius > 0.0)) {
        return Err(invalid("proposal radii must be positive"));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score(points) {
        let p = &points[i];
        if p.score < cfg.score_threshold {
            break;
        }
        let suppressed = kept.iter().any(|&k| {
            let q = &points[k];
            let reach = p.radius + q.radius;
            geom::dist2(&p.position, &q.position) < reach * reach
                && sphere_iou_unchecked(&p.position, p.radius, &q.position, q.radius)
                    > cfg.iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Concatenates the proposals of every window and suppresses them in one pass.
pub fn aggregate_windows(
    windows: &[Vec<SkeletalPoint>],
    cfg: &NmsConfig,
) -> Result<Vec<SkeletalPoint>> {
    let all: Vec<SkeletalPoint> = windows.concat();
    Ok(spherical_nms(&all, cfg)?
        .into_iter()
        .map(|i| all[i].clone())
        .collect())
}

/// Farthest point sampling seeded at the highest-score point.
pub fn fps_downsample(points: &[Point3], scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if scores.len() != points.len() {
        return Err(invalid("score count does not match point count"));
    }
    if m > points.len() {
        return Err(invalid(format!(
            "cannot sample {m} of {} points",
            points.len()
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let first = (0..points.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let mut chosen = vec![first];
    let mut gap: Vec<f64> = points
        .iter()
        .map(|p| geom::dist2(p, &points[first]))
        .collect();
    while chosen.len() < m {
        let next = (0..points.len())
            .max_by(|&a, &b| gap[a].total_cmp(&gap[b]).then(b.cmp(&a)))
            .expect("non-empty");
        chosen.push(next);
        for (g, p) in gap.iter_mut().zip(points) {
            *g = g.min(geom::dist2(p, &points[next]));
        }
    }
    Ok(chosen)
}

/// Seeded sample of `m` distinct indices out of `n`.
pub fn uniform_downsample(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n {
        return Err(invalid(format!("cannot sample {m} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
}
