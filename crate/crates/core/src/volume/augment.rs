//! Intensity normalisation and random flips / in-plane quarter turns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelVolume, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Leave MHU values untouched.
    Identity,
    /// Zero mean, unit variance over each volume.
    PerVolume,
    /// `(v - mean) / std` with fixed statistics.
    Fixed { mean: f64, std: f64 },
}

impl Normalization {
    pub fn apply(&self, v: f32) -> Result<f32> {
        match *self {
            Normalization::Identity => Ok(v),
            Normalization::Fixed { mean, std } => Ok(((v as f64 - mean) / std) as f32),
            Normalization::PerVolume => Err(Error::InvalidArgument(
                "per-volume normalisation needs the whole volume".into(),
            )),
        }
    }
}

pub fn normalize(grid: &VoxelGrid, norm: &Normalization) -> Result<VoxelGrid> {
    let (mean, std) = match *norm {
        Normalization::Identity => return Ok(grid.clone()),
        Normalization::Fixed { mean, std } => {
            if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "normalisation std {std} must be positive"
                )));
            }
            (mean, std)
        }
        Normalization::PerVolume => {
            let n = grid.len() as f64;
            let mean = grid.data.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = grid
                .data
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            (mean, var.sqrt().max(1e-6))
        }
    };
    let data = grid
        .data
        .iter()
        .map(|&v| ((v as f64 - mean) / std) as f32)
        .collect();
    VoxelGrid::new(grid.dims, grid.spacing_mm, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub normalization: Normalization,
    pub flip: bool,
    pub rotate: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            normalization: Normalization::PerVolume,
            flip: true,
            rotate: true,
        }
    }
}

/// Per-volume normalisation, independent axis flips and an in-plane
/// rotation by `k * 90` degrees, all drawn from `seed`.
pub fn augment(grid: &VoxelGrid, labels: &LabelVolume, seed: u64) -> Result<(VoxelGrid, LabelVolume)> {
    augment_with(grid, labels, seed, &AugmentOptions::default())
}

pub fn augment_with(
    grid: &VoxelGrid,
    labels: &LabelVolume,
    seed: u64,
    opts: &AugmentOptions,
) -> Result<(VoxelGrid, LabelVolume)> {
    if grid.dims != labels.dims {
        return Err(Error::Shape(format!(
            "volume dims {:?} vs label dims {:?}",
            grid.dims, labels.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = rng.random_range(0..4usize);
    let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    let turns = if opts.rotate { turns } else { 0 };
    let flips = if opts.flip { flips } else { [false; 3] };

    let norm = normalize(grid, &opts.normalization)?;
    let (dims, data) = transform(grid.dims, &norm.data, turns, flips);
    let (_, lab) = transform(labels.dims, &labels.data, turns, flips);
    let mut spacing = grid.spacing_mm;
    if turns % 2 == 1 {
        spacing.swap(1, 2);
    }
    Ok((VoxelGrid::new(dims, spacing, data)?, LabelVolume::new(dims, lab)?))
}

/// `turns` quarter turns in the (y, x) plane, then the requested flips.
/// One turn maps `out[z][i][j] = in[z][j][nx - 1 - i]`.
pub fn transform<T: Copy>(
    dims: [usize; 3],
    data: &[T],
    turns: usize,
    flips: [bool; 3],
) -> ([usize; 3], Vec<T>) {
    let mut dims = dims;
    let mut cur = data.to_vec();
    for _ in 0..turns % 4 {
        let [nz, ny, nx] = dims;
        let mut out = Vec::with_capacity(cur.len());
        for z in 0..nz {
            for i in 0..nx {
                for j in 0..ny {
                    out.push(cur[(z * ny + j) * nx + (nx - 1 - i)]);
                }
            }
        }
        dims = [nz, nx, ny];
        cur = out;
    }
    if flips.iter().any(|&f| f) {
        let [nz, ny, nx] = dims;
        let mut out = Vec::with_capacity(cur.len());
        for z in 0..nz {
            let sz = if flips[0] { nz - 1 - z } else { z };
            for y in 0..ny {
                let sy = if flips[1] { ny - 1 - y } else { y };
                for x in 0..nx {
                    let sx = if flips[2] { nx - 1 - x } else { x };
                    out.push(cur[(sz * ny + sy) * nx + sx]);
                }
            }
        }
        cur = out;
    }
    (dims, cur)
}
