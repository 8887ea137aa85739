//! Dense CT volumes, aligned label maps, resampling, cropping and
//! augmentation.

mod augment;
mod dataset;
mod io;
mod resample;

pub use augment::{augment, augment_with, normalize, transform, AugmentOptions, Normalization};
pub use dataset::{load_manifest, save_manifest, ManifestEntry, Split};
pub use io::{load_labels, load_volume, save_labels, save_volume, Sidecar};
pub use resample::{downsample, downsample_labels, upsample_labels, upsample_labels_by_factor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest representable intensity in Modified Hounsfield Units.
pub const MAX_MHU: f32 = 32767.0;
pub const AIR_MHU: f32 = 0.0;
pub const WATER_MHU: f32 = 1024.0;

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "saline", "rubber", "clay"];

/// Dense scalar field, z-major (slice, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing_mm:?} must be strictly positive"
            )));
        }
        Ok(VoxelGrid {
            dims,
            spacing_mm,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], value: f32) -> Result<Self> {
        Self::new(dims, spacing_mm, vec![value; dims.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }
}

/// Per-voxel class indices aligned with a [`VoxelGrid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!(
                "label {} at voxel {i} is not a class index",
                data[i]
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn background(dims: [usize; 3]) -> Self {
        LabelVolume {
            dims,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(z, y, x)]
    }

    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &c in &self.data {
            counts[c as usize] += 1;
        }
        counts
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("dims {dims:?} must be positive")));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::Shape(format!(
            "dims {dims:?} need {expected} voxels, got {len}"
        )));
    }
    Ok(())
}

/// Origin and size of a sub-volume, `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl CropSpec {
    pub const TRAINING_SIZE: [usize; 3] = [64, 96, 96];
}

/// Aligned intensity/label crop. Volumes smaller than the crop are padded
/// with air and background; the origin is clamped so the crop fits.
pub fn crop(grid: &VoxelGrid, labels: &LabelVolume, spec: &CropSpec) -> Result<(VoxelGrid, LabelVolume)> {
    if grid.dims != labels.dims {
        return Err(Error::Shape(format!(
            "volume dims {:?} vs label dims {:?}",
            grid.dims, labels.dims
        )));
    }
    if spec.size.contains(&0) {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let mut origin = [0; 3];
    for a in 0..3 {
        let padded = grid.dims[a].max(spec.size[a]);
        origin[a] = spec.origin[a].min(padded - spec.size[a]);
    }
    let [sz, sy, sx] = spec.size;
    let mut data = vec![AIR_MHU; sz * sy * sx];
    let mut lab = vec![0u8; sz * sy * sx];
    for z in 0..sz {
        let gz = origin[0] + z;
        if gz >= grid.dims[0] {
            break;
        }
        for y in 0..sy {
            let gy = origin[1] + y;
            if gy >= grid.dims[1] {
                break;
            }
            let gx0 = origin[2];
            if gx0 >= grid.dims[2] {
                continue;
            }
            let w = sx.min(grid.dims[2] - gx0);
            let src = grid.index(gz, gy, gx0);
            let dst = (z * sy + y) * sx;
            data[dst..dst + w].copy_from_slice(&grid.data[src..src + w]);
            lab[dst..dst + w].copy_from_slice(&labels.data[src..src + w]);
        }
    }
    Ok((
        VoxelGrid::new(spec.size, grid.spacing_mm, data)?,
        LabelVolume::new(spec.size, lab)?,
    ))
}
