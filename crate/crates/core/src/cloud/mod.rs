//! Sparse point-cloud view of CT volumes and block sampling for point
//! networks.

mod io;

pub use io::{load_cloud, save_cloud, CloudSidecar};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, VoxelGrid, MAX_MHU};

/// Inclusive intensity window selecting which voxels become points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Gate {
    fn default() -> Self {
        Gate {
            lo: 600.0,
            hi: MAX_MHU,
        }
    }
}

impl Gate {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo <= self.hi && self.hi <= MAX_MHU) {
            return Err(Error::InvalidArgument(format!(
                "gate ({}, {}) must satisfy 0 <= lo <= hi <= {MAX_MHU}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: f32) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    pub x: u16,
    pub y: u16,
    pub z: u16,
    pub intensity: f32,
}

impl CloudPoint {
    pub fn zyx(&self) -> [usize; 3] {
        [self.z as usize, self.y as usize, self.x as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    pub labels: Option<Vec<u8>>,
    pub source_dims: [usize; 3],
    pub gate: Gate,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-axis `(min, max)` of the `(x, y, z)` coordinates.
    pub fn extent(&self) -> Option<[(u16, u16); 3]> {
        let first = self.points.first()?;
        let mut ext = [(first.x, first.x), (first.y, first.y), (first.z, first.z)];
        for p in &self.points {
            for (a, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                ext[a].0 = ext[a].0.min(v);
                ext[a].1 = ext[a].1.max(v);
            }
        }
        Some(ext)
    }
}

/// Every voxel with `lo <= intensity <= hi`, in z-major scan order.
pub fn volume_to_cloud(
    grid: &VoxelGrid,
    labels: Option<&LabelVolume>,
    gate: Gate,
) -> Result<PointCloud> {
    gate.validate()?;
    if let Some(l) = labels {
        if l.dims != grid.dims {
            return Err(Error::Shape(format!(
                "volume dims {:?} vs label dims {:?}",
                grid.dims, l.dims
            )));
        }
    }
    if grid.dims.iter().any(|&d| d > u16::MAX as usize + 1) {
        return Err(Error::InvalidArgument(format!(
            "dims {:?} exceed 16-bit coordinates",
            grid.dims
        )));
    }
    let [nz, ny, nx] = grid.dims;
    let mut points = Vec::new();
    let mut labs = labels.map(|_| Vec::new());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = grid.index(z, y, x);
                let v = grid.data[i];
                if gate.contains(v) {
                    points.push(CloudPoint {
                        x: x as u16,
                        y: y as u16,
                        z: z as u16,
                        intensity: v,
                    });
                    if let (Some(out), Some(l)) = (labs.as_mut(), labels) {
                        out.push(l.data[i]);
                    }
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        labels: labs,
        source_dims: grid.dims,
        gate,
    })
}

/// Scatters per-point labels into a background volume of `dims`.
pub fn cloud_to_label_volume(cloud: &PointCloud, dims: [usize; 3]) -> Result<LabelVolume> {
    if cloud.is_empty() {
        return Ok(LabelVolume::background(dims));
    }
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("cloud carries no labels".into()))?;
    let mut out = LabelVolume::background(dims);
    for (p, &l) in cloud.points.iter().zip(labels) {
        let [z, y, x] = p.zyx();
        if z >= dims[0] || y >= dims[1] || x >= dims[2] {
            return Err(Error::InvalidArgument(format!(
                "point (x={x}, y={y}, z={z}) outside dims {dims:?}"
            )));
        }
        let i = out.index(z, y, x);
        out.data[i] = l;
    }
    LabelVolume::new(dims, out.data)
}

/// Feature layout of a sampled block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureWidth {
    /// `(x, y, z, i)`
    Four = 4,
    /// `(x, y, z, i, x', y', z')` with `x', y', z'` normalised to the cloud's
    /// bounding extent.
    Seven = 7,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointBlock {
    /// Index into the source cloud of every sampled row.
    pub indices: Vec<usize>,
    /// Row-major `n x width` features.
    pub features: Vec<f32>,
    pub width: usize,
    pub labels: Option<Vec<u8>>,
    /// `(z, y, x)`
    pub block_origin: [usize; 3],
    pub block_size: usize,
    /// Share of the block's distinct points that are foreground.
    pub foreground_fraction: f64,
    /// Set when the source cloud has no foreground at all.
    pub background_only: bool,
}

impl PointBlock {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

fn in_block(p: &CloudPoint, origin: [usize; 3], size: usize) -> bool {
    p.zyx()
        .iter()
        .zip(origin)
        .all(|(&c, o)| c >= o && c < o + size)
}

/// Indices of the cloud points inside the cube at `origin` (z, y, x).
pub fn block_members(cloud: &PointCloud, origin: [usize; 3], size: usize) -> Vec<usize> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| in_block(p, origin, size))
        .map(|(i, _)| i)
        .collect()
}

/// Chooses `n` rows from `members`: a uniform subset when there are enough,
/// otherwise every member once plus uniform draws with replacement.
pub fn choose_rows(members: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if members.len() >= n {
        let mut picked: Vec<usize> = sample(rng, members.len(), n).into_iter().collect();
        picked.sort_unstable();
        picked.into_iter().map(|i| members[i]).collect()
    } else {
        let mut out = members.to_vec();
        while out.len() < n {
            out.push(members[rng.random_range(0..members.len())]);
        }
        out
    }
}

/// Builds feature rows for the given cloud indices.
pub fn assemble_block(
    cloud: &PointCloud,
    indices: Vec<usize>,
    width: FeatureWidth,
    origin: [usize; 3],
    size: usize,
) -> Result<PointBlock> {
    let ext = cloud
        .extent()
        .ok_or_else(|| Error::Sampling("empty cloud".into()))?;
    let w = width as usize;
    let mut features = Vec::with_capacity(indices.len() * w);
    for &i in &indices {
        let p = &cloud.points[i];
        let xyz = [p.x, p.y, p.z];
        features.extend(xyz.iter().map(|&c| c as f32));
        features.push(p.intensity);
        if width == FeatureWidth::Seven {
            for a in 0..3 {
                let (lo, hi) = ext[a];
                let span = (hi - lo) as f32;
                features.push(if span > 0.0 {
                    (xyz[a] - lo) as f32 / span
                } else {
                    0.0
                });
            }
        }
    }
    let labels = cloud
        .labels
        .as_ref()
        .map(|l| indices.iter().map(|&i| l[i]).collect());
    let fg = foreground_fraction(cloud, &indices);
    Ok(PointBlock {
        indices,
        features,
        width: w,
        labels,
        block_origin: origin,
        block_size: size,
        foreground_fraction: fg,
        background_only: false,
    })
}

fn foreground_fraction(cloud: &PointCloud, indices: &[usize]) -> f64 {
    let Some(labels) = &cloud.labels else {
        return 0.0;
    };
    let mut distinct = indices.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.is_empty() {
        return 0.0;
    }
    distinct.iter().filter(|&&i| labels[i] != 0).count() as f64 / distinct.len() as f64
}

/// Exactly `n` rows drawn from the cube of edge `size` at `origin` (z, y, x).
pub fn sample_block(
    cloud: &PointCloud,
    origin: [usize; 3],
    size: usize,
    n: usize,
    width: FeatureWidth,
    seed: u64,
) -> Result<PointBlock> {
    if cloud.is_empty() {
        return Err(Error::Sampling("empty cloud".into()));
    }
    if n == 0 || size == 0 {
        return Err(Error::InvalidArgument("block size and n must be positive".into()));
    }
    let members = block_members(cloud, origin, size);
    if members.is_empty() {
        return Err(Error::Sampling(format!(
            "block at {origin:?} of size {size} holds no points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = choose_rows(&members, n, &mut rng);
    assemble_block(cloud, rows, width, origin, size)
}

/// Block sampler parameters for training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSampling {
    pub size: usize,
    pub n: usize,
    pub width: FeatureWidth,
    /// Candidate origins tried before settling for the best one seen.
    pub retry_budget: usize,
}

impl BlockSampling {
    pub fn new(width: FeatureWidth) -> Self {
        BlockSampling {
            size: 48,
            n: 8092,
            width,
            retry_budget: 64,
        }
    }
}

/// Rejection-samples block origins centred on random cloud points until a
/// block is more than half foreground; past the retry budget the most
/// foreground-rich candidate is used.
pub fn pick_training_block(cloud: &PointCloud, cfg: &BlockSampling, seed: u64) -> Result<PointBlock> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training blocks need a labelled cloud".into()))?;
    if cloud.is_empty() {
        return Err(Error::Sampling("empty cloud".into()));
    }
    let background_only = labels.iter().all(|&l| l == 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, [usize; 3], Vec<usize>)> = None;
    for _ in 0..cfg.retry_budget.max(1) {
        let centre = cloud.points[rng.random_range(0..cloud.len())].zyx();
        let origin = centre.map(|c| c.saturating_sub(cfg.size / 2));
        let members = block_members(cloud, origin, cfg.size);
        let fg = members.iter().filter(|&&i| labels[i] != 0).count() as f64 / members.len() as f64;
        let accept = fg > 0.5 || background_only;
        if best.as_ref().is_none_or(|b| fg > b.0) {
            best = Some((fg, origin, members));
        }
        if accept {
            break;
        }
    }
    let (_, origin, members) = best.expect("at least one candidate");
    let rows = choose_rows(&members, cfg.n, &mut rng);
    let mut block = assemble_block(cloud, rows, cfg.width, origin, cfg.size)?;
    block.background_only = background_only;
    Ok(block)
}
