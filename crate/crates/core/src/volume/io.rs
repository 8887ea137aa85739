//! Raw volume files: `<stem>.vol` (little-endian u16) or `<stem>.lbl` (u8),
//! each with a `<stem>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, VoxelGrid, MAX_MHU, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub unit: String,
}

impl Sidecar {
    pub fn path_for(data_path: &Path) -> PathBuf {
        data_path.with_extension("json")
    }

    pub fn read(data_path: &Path) -> Result<Self> {
        let path = Self::path_for(data_path);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let car: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if car.dims.contains(&0) {
            return Err(Error::Ingest(format!(
                "{}: dims {:?} must be positive",
                path.display(),
                car.dims
            )));
        }
        if car.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Ingest(format!(
                "{}: spacing {:?} must be strictly positive",
                path.display(),
                car.spacing_mm
            )));
        }
        Ok(car)
    }

    fn write(&self, data_path: &Path) -> Result<()> {
        let path = Self::path_for(data_path);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub fn load_volume(path: &Path) -> Result<VoxelGrid> {
    let car = Sidecar::read(path)?;
    if car.unit != "MHU" {
        return Err(Error::Ingest(format!(
            "{}: unit {:?} is not MHU",
            path.display(),
            car.unit
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = car.dims.iter().product();
    if bytes.len() != 2 * n {
        return Err(Error::Ingest(format!(
            "{}: payload is {} bytes, dims {:?} need {}",
            path.display(),
            bytes.len(),
            car.dims,
            2 * n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        let v = u16::from_le_bytes([pair[0], pair[1]]);
        if v as f32 > MAX_MHU {
            let [_, ny, nx] = car.dims;
            return Err(Error::Ingest(format!(
                "{}: intensity {v} at voxel (z={}, y={}, x={}) exceeds {MAX_MHU}",
                path.display(),
                i / (ny * nx),
                (i / nx) % ny,
                i % nx
            )));
        }
        data.push(v as f32);
    }
    VoxelGrid::new(car.dims, car.spacing_mm, data)
}

/// Writes intensities rounded to the nearest integer MHU.
pub fn save_volume(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(2 * grid.len());
    for (i, &v) in grid.data.iter().enumerate() {
        if !(0.0..=MAX_MHU).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "intensity {v} at voxel {i} outside [0, {MAX_MHU}]"
            )));
        }
        bytes.extend_from_slice(&(v.round() as u16).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Sidecar {
        dims: grid.dims,
        spacing_mm: grid.spacing_mm,
        unit: "MHU".into(),
    }
    .write(path)
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let car = Sidecar::read(path)?;
    if car.unit != "class" {
        return Err(Error::Ingest(format!(
            "{}: unit {:?} is not class",
            path.display(),
            car.unit
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = car.dims.iter().product();
    if bytes.len() != n {
        return Err(Error::Ingest(format!(
            "{}: payload is {} bytes, dims {:?} need {n}",
            path.display(),
            bytes.len(),
            car.dims
        )));
    }
    if let Some(i) = bytes.iter().position(|&c| c as usize >= NUM_CLASSES) {
        return Err(Error::Ingest(format!(
            "{}: label {} at voxel {i} is not a class index",
            path.display(),
            bytes[i]
        )));
    }
    LabelVolume::new(car.dims, bytes)
}

pub fn save_labels(path: &Path, labels: &LabelVolume, spacing_mm: [f64; 3]) -> Result<()> {
    fs::write(path, &labels.data).map_err(|e| Error::io(path, e))?;
    Sidecar {
        dims: labels.dims,
        spacing_mm,
        unit: "class".into(),
    }
    .write(path)
}
