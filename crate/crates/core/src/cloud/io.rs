//! Binary point records `(x, y, z, i: u16; label: u8)` with a JSON sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CloudPoint, Gate, PointCloud};
use crate::error::{Error, Result};

const RECORD: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSidecar {
    pub count: usize,
    pub gate: Gate,
    pub source_dims: [usize; 3],
    pub labelled: bool,
}

/// Intensities are stored rounded to integer MHU; unlabelled clouds store 0.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z, p.intensity.round().clamp(0.0, u16::MAX as f32) as u16] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(cloud.labels.as_ref().map_or(0, |l| l[i]));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let car = CloudSidecar {
        count: cloud.len(),
        gate: cloud.gate,
        source_dims: cloud.source_dims,
        labelled: cloud.labels.is_some(),
    };
    let side = path.with_extension("json");
    let text = serde_json::to_string_pretty(&car).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let side = path.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let car: CloudSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != car.count * RECORD {
        return Err(Error::Ingest(format!(
            "{}: {} bytes for {} records",
            path.display(),
            bytes.len(),
            car.count
        )));
    }
    let mut points = Vec::with_capacity(car.count);
    let mut labels = Vec::with_capacity(car.count);
    for rec in bytes.chunks_exact(RECORD) {
        let u = |k: usize| u16::from_le_bytes([rec[2 * k], rec[2 * k + 1]]);
        let p = CloudPoint {
            x: u(0),
            y: u(1),
            z: u(2),
            intensity: u(3) as f32,
        };
        let [z, y, x] = p.zyx();
        if z >= car.source_dims[0] || y >= car.source_dims[1] || x >= car.source_dims[2] {
            return Err(Error::Ingest(format!(
                "{}: point (x={x}, y={y}, z={z}) outside {:?}",
                path.display(),
                car.source_dims
            )));
        }
        points.push(p);
        labels.push(rec[8]);
    }
    Ok(PointCloud {
        points,
        labels: car.labelled.then_some(labels),
        source_dims: car.source_dims,
        gate: car.gate,
    })
}
