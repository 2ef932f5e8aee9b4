//! Volumes, the voxel-to-point transform, and patch extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Point3};

pub const PNVOL_MAGIC: &str = "PNVOL1";

/// Default foreground threshold.
pub const DEFAULT_THETA: f64 = 0.2;

/// Default patch size.
pub const DEFAULT_PATCH_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    U8,
    F32Le,
}

impl VoxelType {
    fn as_str(self) -> &'static str {
        match self {
            VoxelType::U8 => "u8",
            VoxelType::F32Le => "f32le",
        }
    }
}

/// A scalar intensity volume stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.dims[a] as f64 - 1.0))
    }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("PNVOL header line not terminated".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end])
        .map(|s| s.trim_end_matches('\r'))
        .map_err(|_| Error::Format("PNVOL header is not ASCII".into()))
}

pub fn read_volume(bytes: &[u8]) -> Result<Volume> {
    let mut pos = 0;
    let magic = read_line(bytes, &mut pos)?;
    if magic != PNVOL_MAGIC {
        return Err(Error::Format(format!("bad magic `{magic}`")));
    }
    let header = read_line(bytes, &mut pos)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Format(format!("bad header `{header}`")));
    }
    let mut dims = [0usize; 3];
    for (d, f) in dims.iter_mut().zip(&fields[..3]) {
        *d = f
            .parse()
            .map_err(|_| Error::Format(format!("bad dimension `{f}`")))?;
        if *d == 0 {
            return Err(Error::Format("dimensions must be positive".into()));
        }
    }
    let n = dims[0] * dims[1] * dims[2];
    let payload = &bytes[pos..];
    let data = match fields[3] {
        "u8" => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "expected {n} voxel bytes, found {}",
                    payload.len()
                )));
            }
            payload.iter().map(|&b| b as f64 / 255.0).collect()
        }
        "f32le" => {
            if payload.len() != 4 * n {
                return Err(Error::Format(format!(
                    "expected {} voxel bytes, found {}",
                    4 * n,
                    payload.len()
                )));
            }
            let mut data = Vec::with_capacity(n);
            for c in payload.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!("f32 intensity {v} outside [0,1]")));
                }
                data.push(v as f64);
            }
            data
        }
        other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
    };
    Ok(Volume { dims, data })
}

pub fn write_volume(vol: &Volume, dtype: VoxelType) -> Result<Vec<u8>> {
    let n = vol.dims.iter().product::<usize>();
    if vol.data.len() != n {
        return Err(Error::Format(
            "volume data length does not match dims".into(),
        ));
    }
    let mut out = format!(
        "{PNVOL_MAGIC}\n{} {} {} {}\n",
        vol.dims[0],
        vol.dims[1],
        vol.dims[2],
        dtype.as_str()
    )
    .into_bytes();
    match dtype {
        VoxelType::U8 => out.extend(
            vol.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        ),
        VoxelType::F32Le => {
            for &v in &vol.data {
                out.extend_from_slice(&(v.clamp(0.0, 1.0) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Point3,
    pub intensity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronPointCloud {
    pub points: Vec<CloudPoint>,
}

impl NeuronPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.points.iter().map(|p| p.position).collect()
    }
}

/// One point per voxel brighter than `theta`, at its integer voxel coordinate.
pub fn voxel_to_points(vol: &Volume, theta: f64) -> Result<NeuronPointCloud> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in [0,1), got {theta}"
        )));
    }
    let points = vol
        .data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > theta)
        .map(|(i, &v)| {
            let [x, y, z] = vol.coords(i);
            CloudPoint {
                position: [x as f64, y as f64, z as f64],
                intensity: v,
            }
        })
        .collect();
    Ok(NeuronPointCloud { points })
}

/// Indices of the `k` points nearest to `center`, ordered by distance with
/// ties going to the lower index.
pub fn nearest_indices(points: &[Point3], center: &Point3, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (geom::dist2(p, center), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(keyed.len());
    if k == 0 {
        return Vec::new();
    }
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_unstable_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// A lattice-preserving isometry: quarter turns about z then axis flips,
/// both taken about `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub center: Point3,
    pub quarter_turns: u8,
    pub flips: [bool; 3],
}

impl Augmentation {
    pub fn apply(&self, p: &Point3) -> Point3 {
        let d = geom::sub(p, &self.center);
        let (mut x, mut y, mut z) = (d[0], d[1], d[2]);
        for _ in 0..self.quarter_turns % 4 {
            (x, y) = (-y, x);
        }
        if self.flips[0] {
            x = -x;
        }
        if self.flips[1] {
            y = -y;
        }
        if self.flips[2] {
            z = -z;
        }
        geom::add(&self.center, &[x, y, z])
    }
}

/// A fixed-size training or inference patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub points: Vec<CloudPoint>,
    /// Index of each patch point in the source cloud.
    pub source: Vec<usize>,
    pub augmentation: Option<Augmentation>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn from_indices(cloud: &NeuronPointCloud, source: Vec<usize>) -> Self {
        Self {
            points: source.iter().map(|&i| cloud.points[i]).collect(),
            source,
            augmentation: None,
        }
    }
}

/// Seeded random crop: anchor plus its `n_p` nearest points, padded by
/// sampling with replacement when the cloud is smaller than `n_p`.
pub fn make_training_patch(
    cloud: &NeuronPointCloud,
    n_p: usize,
    seed: u64,
    augment: bool,
) -> Result<Patch> {
    if cloud.is_empty() {
        return Err(Error::Empty(
            "cannot crop a patch from an empty cloud".into(),
        ));
    }
    if n_p == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = cloud.positions();
    let anchor = rng.random_range(0..cloud.len());
    let mut source = nearest_indices(&positions, &positions[anchor], n_p);
    let base = source.len();
    while source.len() < n_p {
        source.push(source[rng.random_range(0..base)]);
    }
    let mut patch = Patch::from_indices(cloud, source);
    if augment {
        let aug = Augmentation {
            center: positions[anchor],
            quarter_turns: rng.random_range(0..4u8),
            flips: [
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
            ],
        };
        for p in &mut patch.points {
            p.position = aug.apply(&p.position);
        }
        patch.augmentation = Some(aug);
    }
    Ok(patch)
}

/// Deterministic cover of the cloud by `n_p`-nearest windows, each anchored
/// at the lowest-index point not yet covered.
pub fn sliding_windows(cloud: &NeuronPointCloud, n_p: usize) -> Result<Vec<Vec<usize>>> {
    if cloud.is_empty() {
        return Err(Error::Empty("cannot window an empty cloud".into()));
    }
    if n_p == 0 {
        return Err(Error::InvalidArgument(
            "window size must be positive".into(),
        ));
    }
    let positions = cloud.positions();
    let mut covered = vec![false; cloud.len()];
    let mut windows = Vec::new();
    let mut next = 0;
    while next < covered.len() {
        if covered[next] {
            next += 1;
            continue;
        }
        let members = nearest_indices(&positions, &positions[next], n_p);
        for &m in &members {
            covered[m] = true;
        }
        windows.push(members);
    }
    Ok(windows)
}
