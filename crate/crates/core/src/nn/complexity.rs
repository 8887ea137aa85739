//! Parameter and FLOP totals for a model applied to a whole CT volume.

use serde::{Deserialize, Serialize};

use super::spec::{Layout, NetworkSpec, Shape};
use crate::error::{Error, Result};

/// Reference full-resolution volume, `(slices, rows, columns)`.
pub const REFERENCE_DIMS: [usize; 3] = [300, 512, 512];

/// Settings that turn a per-block point-network cost into a per-volume one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCostModel {
    /// Points per block fed to the network.
    pub block_points: usize,
    /// Fraction of voxels that pass the intensity gate and become points.
    pub occupancy: f64,
}

impl Default for PointCostModel {
    fn default() -> Self {
        PointCostModel {
            block_points: 8092,
            occupancy: 0.30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub factor: usize,
    pub input_dims: [usize; 3],
    pub params: u64,
    /// Two operations per multiply-add.
    pub flops: u64,
}

pub fn downsampled_dims(dims: [usize; 3], factor: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(factor.max(1)))
}

/// Cost of running `spec` over a volume of `dims` (already downsampled).
pub fn complexity(
    spec: &NetworkSpec,
    dims: [usize; 3],
    factor: usize,
    points: &PointCostModel,
) -> Result<ComplexityReport> {
    let (_, channels, layout) = spec.input_node()?;
    let flops = match layout {
        Layout::Dense => spec.count_flops(Shape::Dense { channels, dims })?,
        Layout::Points => {
            if points.block_points == 0 || !(0.0..=1.0).contains(&points.occupancy) {
                return Err(Error::InvalidArgument(format!(
                    "invalid point cost model {points:?}"
                )));
            }
            let block = spec.count_flops(Shape::Points {
                channels,
                n: points.block_points,
            })?;
            let voxels: usize = dims.iter().product();
            let n_points = voxels as f64 * points.occupancy;
            (block as f64 * n_points / points.block_points as f64).round() as u64
        }
    };
    Ok(ComplexityReport {
        model: spec.name.clone(),
        factor,
        input_dims: dims,
        params: spec.count_params(),
        flops,
    })
}
