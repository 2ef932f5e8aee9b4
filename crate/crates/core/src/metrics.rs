//! Distance and matching scores between two reconstructions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{self, Point3};
use crate::par::{self, Exec};
use crate::swc::{resample_edges, NeuronTree};

pub const DEFAULT_SPACING: f64 = 1.0;
pub const DEFAULT_DTHR: f64 = 2.0;
pub const DEFAULT_DMATCH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub esa: f64,
    pub dsa: f64,
    pub pds: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn resampled(tree: &NeuronTree, spacing: f64) -> Result<Vec<Point3>> {
    Ok(resample_edges(tree, spacing)?
        .into_iter()
        .map(|c| c.position)
        .collect())
}

/// Distance from each point of `from` to its nearest point in `to`.
pub fn nearest_distances(exec: Exec, from: &[Point3], to: &[Point3]) -> Vec<f64> {
    par::map_slice(exec, from, |p| {
        to.iter()
            .map(|q| geom::dist2(p, q))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    })
}

/// Pooled bidirectional nearest-point distances: `(esa, dsa, pds)`.
pub fn structure_distances(
    pred: &NeuronTree,
    gt: &NeuronTree,
    spacing: f64,
    d_thr: f64,
) -> Result<(f64, f64, f64)> {
    structure_distances_with(Exec::default(), pred, gt, spacing, d_thr)
}

pub fn structure_distances_with(
    exec: Exec,
    pred: &NeuronTree,
    gt: &NeuronTree,
    spacing: f64,
    d_thr: f64,
) -> Result<(f64, f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty(
            "structure distances need two non-empty trees".into(),
        ));
    }
    if !(d_thr >= 0.0) {
        return Err(invalid("distance threshold must be non-negative"));
    }
    let a = resampled(pred, spacing)?;
    let b = resampled(gt, spacing)?;
    let mut d = nearest_distances(exec, &a, &b);
    d.extend(nearest_distances(exec, &b, &a));
    let n = d.len() as f64;
    let esa = d.iter().sum::<f64>() / n;
    let far: Vec<f64> = d.into_iter().filter(|&x| x > d_thr).collect();
    let pds = far.len() as f64 / n;
    let dsa = if far.is_empty() {
        0.0
    } else {
        far.iter().sum::<f64>() / far.len() as f64
    };
    Ok((esa, dsa, pds))
}

/// Percent precision, recall and F1 of resampled points matched within `d_match`.
pub fn precision_recall_f1(
    pred: &NeuronTree,
    gt: &NeuronTree,
    spacing: f64,
    d_match: f64,
) -> Result<(f64, f64, f64)> {
    precision_recall_f1_with(Exec::default(), pred, gt, spacing, d_match)
}

pub fn precision_recall_f1_with(
    exec: Exec,
    pred: &NeuronTree,
    gt: &NeuronTree,
    spacing: f64,
    d_match: f64,
) -> Result<(f64, f64, f64)> {
    if gt.is_empty() {
        return Err(Error::Empty("ground truth tree is empty".into()));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let a = resampled(pred, spacing)?;
    let b = resampled(gt, spacing)?;
    let tp = nearest_distances(exec, &a, &b)
        .iter()
        .filter(|&&d| d <= d_match)
        .count() as f64;
    let fp = a.len() as f64 - tp;
    let found = nearest_distances(exec, &b, &a)
        .iter()
        .filter(|&&d| d <= d_match)
        .count() as f64;
    let fn_ = b.len() as f64 - found;
    let precision = if tp + fp > 0.0 {
        100.0 * tp / (tp + fp)
    } else {
        0.0
    };
    let recall = if found + fn_ > 0.0 {
        100.0 * found / (found + fn_)
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

/// All six scores with the given thresholds.
pub fn evaluate(
    pred: &NeuronTree,
    gt: &NeuronTree,
    spacing: f64,
    d_thr: f64,
    d_match: f64,
) -> Result<MetricReport> {
    let (esa, dsa, pds) = structure_distances(pred, gt, spacing, d_thr)?;
    let (precision, recall, f1) = precision_recall_f1(pred, gt, spacing, d_match)?;
    Ok(MetricReport {
        esa,
        dsa,
        pds,
        precision,
        recall,
        f1,
    })
}
