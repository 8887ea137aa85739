//! Segmentation maps to object detections: closing, connected components
//! and size pruning.

mod ccl;
mod detect;
mod morph;

pub use ccl::{connected_components, Connectivity};
pub use detect::{
    detect, label_objects, load_detections, save_detections, Detection, DetectionSet, DetectOptions,
};
pub use morph::{close, dilate, erode, StructuringElement};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Dense boolean voxel mask, z-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != bits.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} vs {} mask bits",
                bits.len()
            )));
        }
        Ok(BinaryMask { dims, bits })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    /// Voxels of `labels` equal to `class`.
    pub fn from_class(labels: &LabelVolume, class: u8) -> Self {
        BinaryMask {
            dims: labels.dims,
            bits: labels.data.iter().map(|&c| c == class).collect(),
        }
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            dims: self.dims,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}
