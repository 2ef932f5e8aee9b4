//! Seeded synthetic neurons: random branching trees and noisy rasterized volumes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::{self, Point3};
use crate::swc::{resample_edges, write_swc, NeuronTree, SwcNode, DEFAULT_NODE_TYPE};
use crate::volume::{write_volume, Volume, VoxelType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Chance that a segment end splits into two children.
    pub branch_prob: f64,
    /// Segment length range in voxels, `min < max`.
    pub segment_len: (f64, f64),
    pub root_radius: f64,
    /// Radius factor applied at every split, in (0, 1).
    pub radius_decay: f64,
    pub min_radius: f64,
    /// Largest direction change between consecutive segments, in radians.
    pub max_turn: f64,
    /// Longest root-to-leaf chain, in segments.
    pub max_depth: usize,
    pub max_segments: usize,
    pub noise_sigma: f64,
    /// Fraction of voxels set to full intensity.
    pub speckle_density: f64,
    /// Number of short runs erased along the tree.
    pub gaps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 64],
            branch_prob: 0.3,
            segment_len: (8.0, 16.0),
            root_radius: 3.0,
            radius_decay: 0.8,
            min_radius: 1.0,
            max_turn: 0.6,
            max_depth: 6,
            max_segments: 24,
            noise_sigma: 0.05,
            speckle_density: 1e-4,
            gaps: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 32) {
            return Err(invalid("every volume dimension must be at least 32"));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) || !(0.0..=1.0).contains(&self.speckle_density)
        {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        let (lo, hi) = self.segment_len;
        if !(lo >= 1.0 && hi > lo) {
            return Err(invalid("segment length range must satisfy 1 <= min < max"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(invalid("radius decay must lie in (0, 1)"));
        }
        if !(self.min_radius > 0.0 && self.root_radius >= self.min_radius) {
            return Err(invalid("radii must satisfy 0 < min_radius <= root_radius"));
        }
        if !(self.noise_sigma >= 0.0) || self.max_depth == 0 || self.max_segments == 0 {
            return Err(invalid(
                "noise must be non-negative and depth/segment limits positive",
            ));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = geom::norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return geom::scale(&v, 1.0 / n);
        }
    }
}

/// Unit vector at angle `theta` from unit `d` in a random plane.
fn turn(d: &Point3, theta: f64, rng: &mut ChaCha8Rng) -> Point3 {
    let mut ortho;
    loop {
        let r = random_unit(rng);
        ortho = geom::sub(&r, &geom::scale(d, geom::dot(&r, d)));
        if geom::norm(&ortho) > 1e-3 {
            break;
        }
    }
    let ortho = geom::scale(&ortho, 1.0 / geom::norm(&ortho));
    geom::add(
        &geom::scale(d, theta.cos()),
        &geom::scale(&ortho, theta.sin()),
    )
}

struct Pending {
    parent: usize,
    dir: Point3,
    radius: f64,
    depth: usize,
}

/// Random branching tree grown from near the volume center. Nodes sit about
/// one voxel apart; radii never increase away from the root.
pub fn generate_tree(cfg: &SynthConfig) -> Result<NeuronTree> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos: Vec<Point3> = Vec::new();
    let mut rad: Vec<f64> = Vec::new();
    let mut par: Vec<i64> = Vec::new();

    let c: Point3 = std::array::from_fn(|a| cfg.dims[a] as f64 / 2.0 + rng.random_range(-4.0..4.0));
    pos.push(c);
    rad.push(cfg.root_radius);
    par.push(-1);
    let mut stack = vec![Pending {
        parent: 0,
        dir: random_unit(&mut rng),
        radius: cfg.root_radius,
        depth: 0,
    }];
    let mut segments = 0;
    while let Some(seg) = stack.pop() {
        if segments >= cfg.max_segments {
            break;
        }
        segments += 1;
        let len = rng.random_range(cfg.segment_len.0..cfg.segment_len.1);
        let steps = len.round().max(1.0) as usize;
        let target = turn(&seg.dir, rng.random_range(0.0..cfg.max_turn), &mut rng);
        let r_end = (seg.radius * 0.95).max(cfg.min_radius);
        let mut dir = seg.dir;
        let mut parent = seg.parent;
        let mut flip = [1.0; 3];
        for s in 1..=steps {
            let t = s as f64 / steps as f64;
            let blend = geom::lerp(&seg.dir, &target, t);
            dir = geom::scale(&blend, 1.0 / geom::norm(&blend).max(1e-9));
            for a in 0..3 {
                dir[a] *= flip[a];
            }
            let r = seg.radius + (r_end - seg.radius) * t;
            let mut next = geom::add(&pos[parent], &dir);
            // reflect off the walls, keeping the whole tube inside
            for a in 0..3 {
                let lo = r + 1.0;
                let hi = cfg.dims[a] as f64 - 2.0 - r;
                if next[a] < lo || next[a] > hi {
                    flip[a] = -flip[a];
                    dir[a] = -dir[a];
                    next[a] = (pos[parent][a] + dir[a]).clamp(lo, hi);
                }
            }
            pos.push(next);
            rad.push(r);
            par.push(parent as i64 + 1);
            parent = pos.len() - 1;
        }
        if seg.depth + 1 >= cfg.max_depth {
            continue;
        }
        if rng.random_bool(cfg.branch_prob) {
            let r = (r_end * cfg.radius_decay).max(cfg.min_radius);
            for _ in 0..2 {
                let d = turn(
                    &dir,
                    rng.random_range(0.3..cfg.max_turn.max(0.31) + 0.4),
                    &mut rng,
                );
                stack.push(Pending {
                    parent,
                    dir: d,
                    radius: r,
                    depth: seg.depth + 1,
                });
            }
        } else {
            stack.push(Pending {
                parent,
                dir,
                radius: r_end,
                depth: seg.depth + 1,
            });
        }
    }
    let nodes = pos
        .into_iter()
        .zip(rad)
        .zip(par)
        .enumerate()
        .map(|(i, ((position, radius), parent_id))| SwcNode {
            id: i as i64 + 1,
            node_type: DEFAULT_NODE_TYPE,
            position,
            radius,
            parent_id,
        })
        .collect();
    Ok(NeuronTree::new(nodes))
}

/// Renders `tree` into a volume: tube intensity `1 - 0.5 d/r`, optional
/// erased gaps, Gaussian noise and salt speckle, clamped to [0, 1].
pub fn rasterize(tree: &NeuronTree, cfg: &SynthConfig) -> Result<Volume> {
    cfg.validate()?;
    let dims = cfg.dims;
    for n in &tree.nodes {
        if (0..3).any(|a| !(n.position[a] >= 0.0 && n.position[a] <= dims[a] as f64 - 1.0)) {
            return Err(invalid(format!("node {} lies outside the volume", n.id)));
        }
    }
    let mut vol = Volume::zeros(dims);
    let centerline = resample_edges(tree, 0.5)?;
    for c in &centerline {
        let r = c.radius;
        let lo: [usize; 3] = std::array::from_fn(|a| (c.position[a] - r).floor().max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((c.position[a] + r).ceil() as usize).min(dims[a] - 1));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let d = geom::dist(&[x as f64, y as f64, z as f64], &c.position);
                    if d <= r {
                        let i = vol.index(x, y, z);
                        vol.data[i] = vol.data[i].max(1.0 - 0.5 * d / r);
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_f00d);
    if cfg.gaps > 0 && tree.len() > 8 {
        let parents = tree.parent_indices();
        for _ in 0..cfg.gaps {
            // a short run of three nodes somewhere below the root
            let mut v = rng.random_range(1..tree.len());
            let mut run = Vec::new();
            while run.len() < 3 {
                run.push(v);
                match parents[v] {
                    Some(p) if p != 0 => v = p,
                    _ => break,
                }
            }
            for &k in &run {
                let n = &tree.nodes[k];
                let r = n.radius + 1.0;
                let lo: [usize; 3] =
                    std::array::from_fn(|a| (n.position[a] - r).floor().max(0.0) as usize);
                let hi: [usize; 3] =
                    std::array::from_fn(|a| ((n.position[a] + r).ceil() as usize).min(dims[a] - 1));
                for x in lo[0]..=hi[0] {
                    for y in lo[1]..=hi[1] {
                        for z in lo[2]..=hi[2] {
                            if geom::dist(&[x as f64, y as f64, z as f64], &n.position) <= r {
                                let i = vol.index(x, y, z);
                                vol.data[i] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| invalid(e.to_string()))?;
        for v in &mut vol.data {
            *v += normal.sample(&mut rng);
        }
    }
    if cfg.speckle_density > 0.0 {
        for v in &mut vol.data {
            if rng.random_bool(cfg.speckle_density) {
                *v = 1.0;
            }
        }
    }
    for v in &mut vol.data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(vol)
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub index: usize,
    pub seed: u64,
    pub volume: String,
    pub swc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub volumes: Vec<DatasetEntry>,
}

/// Seed of the `i`-th volume of a dataset.
pub fn volume_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i as u64)
}

/// Writes `count` volume/tree pairs and a manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, count: usize) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut volumes = Vec::with_capacity(count);
    for i in 0..count {
        let vcfg = SynthConfig {
            seed: volume_seed(cfg.seed, i),
            ..cfg.clone()
        };
        let tree = generate_tree(&vcfg)?;
        let vol = rasterize(&tree, &vcfg)?;
        let entry = DatasetEntry {
            index: i,
            seed: vcfg.seed,
            volume: format!("vol_{i}.pnvol"),
            swc: format!("gt_{i}.swc"),
        };
        fs::write(dir.join(&entry.volume), write_volume(&vol, VoxelType::U8)?)?;
        fs::write(dir.join(&entry.swc), write_swc(&tree)?)?;
        volumes.push(entry);
    }
    let manifest = Manifest {
        config: cfg.clone(),
        volumes,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Volume and tree paths listed in a dataset manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.volumes.is_empty() {
        return Err(Error::Empty(format!(
            "dataset {} lists no volumes",
            dir.display()
        )));
    }
    Ok(manifest
        .volumes
        .iter()
        .map(|e| (dir.join(&e.volume), dir.join(&e.swc)))
        .collect())
}
