//! `export-slices`: greyscale slice images with material overlays.

use std::fs;
use std::path::{Path, PathBuf};

use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::DetectionSet;
use crate::volume::{LabelVolume, VoxelGrid};

/// Overlay colours for saline, rubber and clay.
pub const CLASS_COLOURS: [[u8; 3]; 3] = [[255, 165, 0], [0, 200, 0], [0, 80, 255]];
/// MHU mapped to white.
pub const DISPLAY_MAX_MHU: f32 = 2500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Z => "z",
            Axis::Y => "y",
            Axis::X => "x",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Axis::Z),
            "y" => Ok(Axis::Y),
            "x" => Ok(Axis::X),
            other => Err(Error::InvalidArgument(format!("axis {other:?} is not z, y or x"))),
        }
    }
}

pub fn grey(v: f32) -> u8 {
    (v.clamp(0.0, DISPLAY_MAX_MHU) / DISPLAY_MAX_MHU * 255.0).round() as u8
}

/// Paints detection voxels with their class.
pub fn detections_to_labels(set: &DetectionSet) -> Result<LabelVolume> {
    let mut labels = LabelVolume::background(set.dims);
    for d in &set.detections {
        for &v in &d.voxels {
            labels.data[v] = d.class;
        }
    }
    Ok(labels)
}

/// One slice as an RGB image: rows and columns are the two remaining axes
/// in (z, y, x) order.
pub fn render_slice(grid: &VoxelGrid, overlay: Option<&LabelVolume>, axis: Axis, index: usize) -> Result<RgbImage> {
    let a = axis.index();
    if index >= grid.dims[a] {
        return Err(Error::InvalidArgument(format!(
            "slice {index} out of range for axis {} of length {}",
            axis.name(),
            grid.dims[a]
        )));
    }
    if let Some(l) = overlay {
        if l.dims != grid.dims {
            return Err(Error::Shape(format!(
                "overlay {:?} vs volume {:?}",
                l.dims, grid.dims
            )));
        }
    }
    let (ra, ca) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (grid.dims[ra], grid.dims[ca]);
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = [0; 3];
            p[a] = index;
            p[ra] = r;
            p[ca] = c;
            let i = grid.index(p[0], p[1], p[2]);
            let class = overlay.map_or(0, |l| l.data[i]);
            let px = if class > 0 && (class as usize) <= CLASS_COLOURS.len() {
                CLASS_COLOURS[class as usize - 1]
            } else {
                [grey(grid.data[i]); 3]
            };
            img.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Writes `<stem>_<axis><index>.ppm` for each index into `out_dir`.
pub fn cmd_export_slices(
    grid: &VoxelGrid,
    overlay: Option<&LabelVolume>,
    axis: Axis,
    indices: &[usize],
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let images = indices
        .iter()
        .map(|&i| render_slice(grid, overlay, axis, i))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(indices.len());
    for (img, &i) in images.iter().zip(indices) {
        let path = out_dir.join(format!("{stem}_{}{i:04}.ppm", axis.name()));
        write_ppm(&path, img)?;
        out.push(path);
    }
    Ok(out)
}

/// Binary P6 pixmap.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    Ok(img.to_rgb8())
}
