//! Resolution changes for intensities and labels.

use super::{LabelVolume, VoxelGrid, NUM_CLASSES};
use crate::error::{Error, Result};

fn check_factor(factor: usize) -> Result<()> {
    if ![2, 4, 8].contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "down-sampling factor {factor} not in {{2, 4, 8}}"
        )));
    }
    Ok(())
}

fn reduced(dims: [usize; 3], factor: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(factor))
}

/// Block-mean down-sampling. Output dims round up; trailing partial blocks
/// are padded with air, so every output voxel averages `factor^3` values.
pub fn downsample(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    check_factor(factor)?;
    let od = reduced(grid.dims, factor);
    let mut sums = vec![0f64; od.iter().product()];
    let [nz, ny, nx] = grid.dims;
    for z in 0..nz {
        for y in 0..ny {
            let row = &grid.data[grid.index(z, y, 0)..grid.index(z, y, 0) + nx];
            let base = ((z / factor) * od[1] + y / factor) * od[2];
            for (x, &v) in row.iter().enumerate() {
                sums[base + x / factor] += v as f64;
            }
        }
    }
    let block = factor.pow(3) as f64;
    let data = sums.into_iter().map(|s| (s / block) as f32).collect();
    VoxelGrid::new(od, grid.spacing_mm.map(|s| s * factor as f64), data)
}

/// Majority-vote down-sampling. Ties prefer a foreground class over
/// background, then the smaller index. Padding voxels count as background.
pub fn downsample_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    check_factor(factor)?;
    let od = reduced(labels.dims, factor);
    let mut counts = vec![[0u32; NUM_CLASSES]; od.iter().product()];
    let [nz, ny, nx] = labels.dims;
    for z in 0..nz {
        for y in 0..ny {
            let base = ((z / factor) * od[1] + y / factor) * od[2];
            for x in 0..nx {
                counts[base + x / factor][labels.get(z, y, x) as usize] += 1;
            }
        }
    }
    let block = factor.pow(3) as u32;
    let data = counts
        .into_iter()
        .map(|mut c| {
            c[0] += block - c.iter().sum::<u32>();
            let max = *c.iter().max().expect("classes");
            (1..NUM_CLASSES)
                .find(|&k| c[k] == max)
                .unwrap_or(0) as u8
        })
        .collect();
    LabelVolume::new(od, data)
}

/// Nearest-neighbour resize: output index `i` reads source index
/// `floor(i * src / dst)` on each axis.
pub fn upsample_labels(labels: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    if (0..3).any(|a| target[a] < labels.dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "target dims {target:?} smaller than source {:?}",
            labels.dims
        )));
    }
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| (0..target[a]).map(|i| i * labels.dims[a] / target[a]).collect())
        .collect();
    Ok(gather(labels, target, &maps))
}

/// Exact inverse of block down-sampling by `factor`: output index `i` reads
/// source index `i / factor` (clamped), then the result is cut to `target`.
pub fn upsample_labels_by_factor(
    labels: &LabelVolume,
    factor: usize,
    target: [usize; 3],
) -> Result<LabelVolume> {
    if factor == 0 || (0..3).any(|a| target[a].div_ceil(factor) != labels.dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "labels {:?} are not {target:?} reduced by {factor}",
            labels.dims
        )));
    }
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| (0..target[a]).map(|i| i / factor).collect())
        .collect();
    Ok(gather(labels, target, &maps))
}

fn gather(labels: &LabelVolume, target: [usize; 3], maps: &[Vec<usize>]) -> LabelVolume {
    let mut data = Vec::with_capacity(target.iter().product());
    for &z in &maps[0] {
        for &y in &maps[1] {
            let row = labels.index(z, y, 0);
            data.extend(maps[2].iter().map(|&x| labels.data[row + x]));
        }
    }
    LabelVolume {
        dims: target,
        data,
    }
}
