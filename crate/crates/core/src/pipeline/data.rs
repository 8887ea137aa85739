//! Loading, resampling and feature preparation shared by training and
//! inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ClassWeighting, ModelKind, NormalizationKind, RunConfig};
use crate::cloud::{volume_to_cloud, PointBlock, PointCloud};
use crate::error::{Error, Result};
use crate::nn::loss::inverse_frequency_weights;
use crate::nn::{build_pointnet, build_pointnet2, build_residual_unet3d, build_unet3d, NetworkSpec};
use crate::volume::{
    downsample, downsample_labels, load_labels, load_manifest, load_volume, LabelVolume, ManifestEntry, Normalization,
    Split, VoxelGrid, NUM_CLASSES,
};

pub fn build_spec(cfg: &RunConfig) -> Result<NetworkSpec> {
    match cfg.model {
        ModelKind::Unet3d => build_unet3d(cfg.levels, cfg.fvols, 1, NUM_CLASSES),
        ModelKind::ResUnet3d => build_residual_unet3d(cfg.levels, cfg.fvols, 1, NUM_CLASSES),
        ModelKind::Pointnet => build_pointnet(cfg.feature_width() as usize, NUM_CLASSES),
        ModelKind::Pointnet2 => build_pointnet2(cfg.feature_width() as usize, NUM_CLASSES, &cfg.pointnet2()),
    }
}

pub fn reduce_volume(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 1 {
        Ok(grid.clone())
    } else {
        downsample(grid, factor)
    }
}

pub fn reduce_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    if factor == 1 {
        Ok(labels.clone())
    } else {
        downsample_labels(labels, factor)
    }
}

/// A manifest volume at working resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub full_dims: [usize; 3],
    pub grid: VoxelGrid,
    pub labels: LabelVolume,
}

pub fn load_sample(manifest: &Path, entry: &ManifestEntry, factor: usize) -> Result<Sample> {
    let (vol, lab) = entry.resolve(manifest);
    let grid = load_volume(&vol)?;
    let labels = load_labels(&lab)?;
    if grid.dims != labels.dims {
        return Err(Error::Shape(format!(
            "{}: volume {:?} vs labels {:?}",
            entry.name(),
            grid.dims,
            labels.dims
        )));
    }
    Ok(Sample {
        name: entry.name(),
        full_dims: grid.dims,
        grid: reduce_volume(&grid, factor)?,
        labels: reduce_labels(&labels, factor)?,
    })
}

pub fn split_entries(manifest: &Path, split: Split) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = load_manifest(manifest)?
        .into_iter()
        .filter(|e| e.split == split)
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no {split:?} volumes",
            manifest.display()
        )));
    }
    Ok(entries)
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, var.sqrt().max(1e-6))
}

/// Everything fitted on the training split that inference must reapply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Fixed statistics, or `None` for per-volume / identity modes.
    pub intensity: Option<(f64, f64)>,
    pub class_weights: Option<Vec<f64>>,
    pub spacing_mm: [f64; 3],
}

impl Preprocess {
    pub fn fit(cfg: &RunConfig, samples: &[Sample], clouds: Option<&[PointCloud]>) -> Self {
        let intensity = match (cfg.model.is_dense(), cfg.normalization) {
            (true, NormalizationKind::TrainingSet) => Some(mean_std(
                samples.iter().flat_map(|s| s.grid.data.iter().map(|&v| v as f64)),
            )),
            (false, NormalizationKind::TrainingSet | NormalizationKind::PerVolume) => {
                Some(mean_std(clouds.unwrap_or(&[]).iter().flat_map(|c| {
                    c.points.iter().map(|p| p.intensity as f64)
                })))
            }
            _ => None,
        };
        let class_weights = match cfg.class_weights {
            ClassWeighting::None => None,
            w => {
                let mut counts = [0u64; NUM_CLASSES];
                match clouds {
                    Some(cs) => {
                        for l in cs.iter().filter_map(|c| c.labels.as_ref()).flatten() {
                            counts[*l as usize] += 1;
                        }
                    }
                    None => {
                        for s in samples {
                            for (c, n) in s.labels.class_counts().iter().enumerate() {
                                counts[c] += n;
                            }
                        }
                    }
                }
                let inv = inverse_frequency_weights(&counts);
                Some(if w == ClassWeighting::SqrtInverseFrequency {
                    inv.iter().map(|v| v.sqrt()).collect()
                } else {
                    inv
                })
            }
        };
        Preprocess {
            intensity,
            class_weights,
            spacing_mm: samples.first().map_or([1.0; 3], |s| s.grid.spacing_mm),
        }
    }

    /// Normalisation for one dense volume.
    pub fn normalization(&self, cfg: &RunConfig, grid: &VoxelGrid) -> Normalization {
        match (self.intensity, cfg.normalization) {
            (Some((mean, std)), _) => Normalization::Fixed { mean, std },
            (None, NormalizationKind::Identity) => Normalization::Identity,
            (None, _) => {
                let (mean, std) = mean_std(grid.data.iter().map(|&v| v as f64));
                Normalization::Fixed { mean, std }
            }
        }
    }

    fn point_intensity(&self, v: f32) -> f32 {
        match self.intensity {
            Some((mean, std)) => ((v as f64 - mean) / std) as f32,
            None => v,
        }
    }
}

pub fn gated_cloud(cfg: &RunConfig, sample: &Sample, with_labels: bool) -> Result<PointCloud> {
    volume_to_cloud(
        &sample.grid,
        with_labels.then_some(&sample.labels),
        cfg.gate(),
    )
}

/// Network features (channel-major `[C, n]`) and grouping coordinates
/// (`[n, 3]`) for one block. Coordinates become offsets from the block
/// centre in block units and intensity is standardised; normalised extent
/// coordinates pass through.
pub fn block_tensors(cfg: &RunConfig, pre: &Preprocess, block: &PointBlock) -> (Vec<f32>, Vec<f64>) {
    let n = block.len();
    let w = block.width;
    let half = block.block_size as f32 / 2.0;
    // Feature rows are (x, y, z, ...); origins are (z, y, x).
    let centre = [
        block.block_origin[2] as f32 + half,
        block.block_origin[1] as f32 + half,
        block.block_origin[0] as f32 + half,
    ];
    let scale = if cfg.anisotropic_coords {
        let s = pre.spacing_mm;
        [1.0, s[1] / s[2], s[0] / s[2]]
    } else {
        [1.0; 3]
    };
    let mut features = vec![0.0f32; w * n];
    let mut coords = Vec::with_capacity(3 * n);
    for i in 0..n {
        let row = block.row(i);
        for a in 0..3 {
            features[a * n + i] = (row[a] - centre[a]) / block.block_size as f32;
            coords.push(row[a] as f64 * scale[a]);
        }
        features[3 * n + i] = pre.point_intensity(row[3]);
        for a in 4..w {
            features[a * n + i] = row[a];
        }
    }
    (features, coords)
}
