//! Per-class detection and its JSON / run-length serialisation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ccl::{connected_components, Connectivity};
use super::morph::{close, StructuringElement};
use super::BinaryMask;
use crate::error::{Error, Result};
use crate::volume::{LabelVolume, NUM_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class: u8,
    /// Sorted flat z-major voxel indices.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
    /// Inclusive `[z0, y0, x0, z1, y1, x1]`.
    pub bbox: [usize; 6],
}

impl Detection {
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn from_voxels(class: u8, voxels: Vec<usize>, dims: [usize; 3], spacing_mm: [f64; 3]) -> Self {
        let mut bbox = [usize::MAX, usize::MAX, usize::MAX, 0, 0, 0];
        for &v in &voxels {
            let c = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
            for a in 0..3 {
                bbox[a] = bbox[a].min(c[a]);
                bbox[a + 3] = bbox[a + 3].max(c[a]);
            }
        }
        let volume_mm3 = voxels.len() as f64 * spacing_mm.iter().product::<f64>();
        Detection {
            class,
            voxels,
            volume_mm3,
            bbox,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectOptions {
    pub se: StructuringElement,
    pub connectivity: Connectivity,
    pub min_voxels: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            se: StructuringElement::cube(1),
            connectivity: Connectivity::Corner,
            min_voxels: 64,
        }
    }
}

impl DetectOptions {
    /// Prune threshold for labels at `1/factor` resolution that keeps the
    /// same physical-volume cut.
    pub fn scaled_min_voxels(min_voxels: usize, factor: usize) -> usize {
        (min_voxels as f64 / factor.pow(3) as f64).ceil() as usize
    }
}

/// For each foreground class in ascending order: binarise, close, label
/// components and drop those smaller than `min_voxels`.
pub fn detect(labels: &LabelVolume, spacing_mm: [f64; 3], opts: &DetectOptions) -> DetectionSet {
    let mut detections = Vec::new();
    for class in 1..NUM_CLASSES as u8 {
        let mask = BinaryMask::from_class(labels, class);
        if mask.count() == 0 {
            continue;
        }
        let closed = close(&mask, &opts.se);
        for comp in connected_components(&closed, opts.connectivity) {
            if comp.len() >= opts.min_voxels {
                detections.push(Detection::from_voxels(class, comp, labels.dims, spacing_mm));
            }
        }
    }
    DetectionSet {
        dims: labels.dims,
        spacing_mm,
        detections,
    }
}

/// Ground-truth objects: per-class components with no closing or pruning.
pub fn label_objects(
    labels: &LabelVolume,
    spacing_mm: [f64; 3],
    connectivity: Connectivity,
) -> DetectionSet {
    let mut detections = Vec::new();
    for class in 1..NUM_CLASSES as u8 {
        let mask = BinaryMask::from_class(labels, class);
        for comp in connected_components(&mask, connectivity) {
            detections.push(Detection::from_voxels(class, comp, labels.dims, spacing_mm));
        }
    }
    DetectionSet {
        dims: labels.dims,
        spacing_mm,
        detections,
    }
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    class: u8,
    voxel_count: usize,
    volume_mm3: f64,
    bbox: [usize; 6],
}

#[derive(Serialize, Deserialize)]
struct VoxelSidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    /// Per detection, `[start, length]` runs of flat voxel indices.
    runs: Vec<Vec<[usize; 2]>>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("rle.json")
}

fn encode_runs(voxels: &[usize]) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for &v in voxels {
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == v => r[1] += 1,
            _ => runs.push([v, 1]),
        }
    }
    runs
}

/// Writes the detection list to `path` and exact voxel sets to a
/// `.rle.json` sidecar next to it.
pub fn save_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    let records: Vec<DetectionRecord> = set
        .detections
        .iter()
        .map(|d| DetectionRecord {
            class: d.class,
            voxel_count: d.voxel_count(),
            volume_mm3: d.volume_mm3,
            bbox: d.bbox,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let car = VoxelSidecar {
        dims: set.dims,
        spacing_mm: set.spacing_mm,
        runs: set.detections.iter().map(|d| encode_runs(&d.voxels)).collect(),
    };
    let text = serde_json::to_string(&car).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_detections(path: &Path) -> Result<DetectionSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<DetectionRecord> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let car: VoxelSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    if car.runs.len() != records.len() {
        return Err(Error::Ingest(format!(
            "{}: {} voxel sets for {} detections",
            side.display(),
            car.runs.len(),
            records.len()
        )));
    }
    let total: usize = car.dims.iter().product();
    let mut detections = Vec::with_capacity(records.len());
    for (rec, runs) in records.into_iter().zip(car.runs) {
        let voxels: Vec<usize> = runs.iter().flat_map(|r| r[0]..r[0] + r[1]).collect();
        if voxels.len() != rec.voxel_count || voxels.iter().any(|&v| v >= total) {
            return Err(Error::Ingest(format!(
                "{}: voxel set inconsistent with its record",
                side.display()
            )));
        }
        detections.push(Detection {
            class: rec.class,
            voxels,
            volume_mm3: rec.volume_mm3,
            bbox: rec.bbox,
        });
    }
    Ok(DetectionSet {
        dims: car.dims,
        spacing_mm: car.spacing_mm,
        detections,
    })
}
