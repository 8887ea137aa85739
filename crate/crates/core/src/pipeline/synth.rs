//! Synthetic CT bags: material ellipsoids and curved sheets plus benign
//! clutter in air, with exact labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::volume::{save_labels, save_manifest, save_volume, LabelVolume, ManifestEntry, Split, VoxelGrid, AIR_MHU, MAX_MHU};

const PLACEMENT_ATTEMPTS: usize = 500;
const SEMI_AXIS_RANGE: (usize, usize) = (6, 14);
const SHEET_THICKNESS: (usize, usize) = (4, 6);
const SHEET_EXTENT: (usize, usize) = (18, 36);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBagSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Ellipsoids per material, indexed by class - 1.
    pub blobs: [usize; 3],
    pub sheets: [usize; 3],
    pub clutter: usize,
    /// `[lo, hi]` MHU per material, indexed by class - 1.
    pub bands: [[f32; 2]; 3],
    pub benign_band: [f32; 2],
    pub noise_sigma: f64,
    /// Minimum empty margin between object bounding boxes.
    pub gap: usize,
    pub seed: u64,
}

impl SyntheticBagSpec {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        SyntheticBagSpec {
            dims: cfg.synth_dims,
            spacing_mm: cfg.synth_spacing_mm,
            blobs: cfg.synth_blobs,
            sheets: cfg.synth_sheets,
            clutter: cfg.synth_clutter,
            bands: [cfg.synth_saline, cfg.synth_rubber, cfg.synth_clay],
            benign_band: cfg.synth_benign,
            noise_sigma: cfg.synth_noise,
            gap: cfg.synth_gap,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipsoid {
        /// `(z, y, x)`
        centre: [usize; 3],
        semi_axes: [usize; 3],
    },
    /// Slab of constant thickness around a paraboloid surface bulging along
    /// `normal_axis`.
    Sheet {
        normal_axis: usize,
        centre: [usize; 3],
        half_extent: [usize; 2],
        thickness: usize,
        bulge: usize,
    },
}

impl Shape {
    /// Every voxel of the shape, in flat z-major order, clipped to `dims`.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        let [lo, hi] = self.bbox();
        for z in lo[0]..=hi[0].min(dims[0] - 1) {
            for y in lo[1]..=hi[1].min(dims[1] - 1) {
                for x in lo[2]..=hi[2].min(dims[2] - 1) {
                    if self.contains([z, y, x]) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { centre, semi_axes } => {
                let s: f64 = (0..3)
                    .map(|a| {
                        let d = p[a] as f64 - centre[a] as f64;
                        (d / semi_axes[a] as f64).powi(2)
                    })
                    .sum();
                s <= 1.0
            }
            Shape::Sheet {
                normal_axis,
                centre,
                half_extent,
                thickness,
                bulge,
            } => {
                let (u, v) = in_plane_axes(normal_axis);
                let du = p[u] as f64 - centre[u] as f64;
                let dv = p[v] as f64 - centre[v] as f64;
                let (hu, hv) = (half_extent[0] as f64, half_extent[1] as f64);
                if du.abs() > hu || dv.abs() > hv {
                    return false;
                }
                let r2 = (du / hu).powi(2) + (dv / hv).powi(2);
                let surface = centre[normal_axis] as f64 - bulge as f64 * r2 / 2.0;
                let d = p[normal_axis] as f64 - surface;
                d >= 0.0 && d < thickness as f64
            }
        }
    }

    /// Inclusive `[lo, hi]` corner bounds, not clipped to any volume.
    pub fn bbox(&self) -> [[usize; 3]; 2] {
        match *self {
            Shape::Ellipsoid { centre, semi_axes } => [
                std::array::from_fn(|a| centre[a] - semi_axes[a]),
                std::array::from_fn(|a| centre[a] + semi_axes[a]),
            ],
            Shape::Sheet {
                normal_axis,
                centre,
                half_extent,
                thickness,
                bulge,
            } => {
                let (u, v) = in_plane_axes(normal_axis);
                let mut lo = [0; 3];
                let mut hi = [0; 3];
                lo[u] = centre[u] - half_extent[0];
                hi[u] = centre[u] + half_extent[0];
                lo[v] = centre[v] - half_extent[1];
                hi[v] = centre[v] + half_extent[1];
                lo[normal_axis] = centre[normal_axis] - bulge;
                hi[normal_axis] = centre[normal_axis] + thickness - 1;
                [lo, hi]
            }
        }
    }
}

fn in_plane_axes(normal: usize) -> (usize, usize) {
    match normal {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    /// Material class 1..=3, or 0 for benign clutter.
    pub class: u8,
    pub shape: Shape,
    /// Mean intensity before noise.
    pub intensity: f32,
    pub voxel_count: usize,
}

#[derive(Clone, Debug)]
pub struct SynthBag {
    pub grid: VoxelGrid,
    pub labels: LabelVolume,
    pub objects: Vec<PlacedObject>,
}

fn boxes_clear(a: &[[usize; 3]; 2], b: &[[usize; 3]; 2], gap: usize) -> bool {
    (0..3).any(|k| a[1][k] + gap < b[0][k] || b[1][k] + gap < a[0][k])
}

fn draw_shape(rng: &mut ChaCha8Rng, sheet: bool, dims: [usize; 3]) -> Option<Shape> {
    let shape = if sheet {
        let normal_axis = rng.random_range(0..3);
        let half_extent = [
            rng.random_range(SHEET_EXTENT.0..=SHEET_EXTENT.1) / 2,
            rng.random_range(SHEET_EXTENT.0..=SHEET_EXTENT.1) / 2,
        ];
        let thickness = rng.random_range(SHEET_THICKNESS.0..=SHEET_THICKNESS.1);
        let bulge = rng.random_range(2..=5);
        let (u, v) = in_plane_axes(normal_axis);
        let mut margin = [0; 3];
        margin[u] = half_extent[0];
        margin[v] = half_extent[1];
        margin[normal_axis] = bulge;
        let mut upper = margin;
        upper[normal_axis] = thickness - 1;
        let centre = random_centre(rng, dims, margin, upper)?;
        Shape::Sheet {
            normal_axis,
            centre,
            half_extent,
            thickness,
            bulge,
        }
    } else {
        let semi_axes: [usize; 3] =
            std::array::from_fn(|_| rng.random_range(SEMI_AXIS_RANGE.0..=SEMI_AXIS_RANGE.1));
        let centre = random_centre(rng, dims, semi_axes, semi_axes)?;
        Shape::Ellipsoid { centre, semi_axes }
    };
    Some(shape)
}

/// Centre such that `[c - below, c + above]` stays one voxel inside the
/// volume on every axis.
fn random_centre(
    rng: &mut ChaCha8Rng,
    dims: [usize; 3],
    below: [usize; 3],
    above: [usize; 3],
) -> Option<[usize; 3]> {
    let mut c = [0; 3];
    for a in 0..3 {
        let lo = below[a] + 1;
        let hi = dims[a].checked_sub(above[a] + 2)?;
        if lo > hi {
            return None;
        }
        c[a] = rng.random_range(lo..=hi);
    }
    Some(c)
}

/// Generates one bag. Objects are placed by rejection sampling so their
/// bounding boxes stay `gap` voxels apart.
pub fn generate_bag(spec: &SyntheticBagSpec) -> Result<SynthBag> {
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;

    // (class, sheet?, band) in placement order: large sheets first.
    let mut wanted: Vec<(u8, bool, [f32; 2])> = Vec::new();
    for m in 0..3 {
        for _ in 0..spec.sheets[m] {
            wanted.push((m as u8 + 1, true, spec.bands[m]));
        }
    }
    for m in 0..3 {
        for _ in 0..spec.blobs[m] {
            wanted.push((m as u8 + 1, false, spec.bands[m]));
        }
    }
    for i in 0..spec.clutter {
        wanted.push((0, i % 2 == 1, spec.benign_band));
    }

    let mut objects: Vec<PlacedObject> = Vec::new();
    let mut boxes: Vec<[[usize; 3]; 2]> = Vec::new();
    for (class, sheet, band) in wanted {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let Some(shape) = draw_shape(&mut rng, sheet, dims) else {
                continue;
            };
            let bb = shape.bbox();
            if boxes.iter().all(|b| boxes_clear(b, &bb, spec.gap)) {
                placed = Some(shape);
                break;
            }
        }
        let shape = placed.ok_or_else(|| {
            Error::Sampling(format!(
                "could not place object {} of {} in {dims:?} after {PLACEMENT_ATTEMPTS} attempts",
                objects.len() + 1,
                spec.blobs.iter().chain(&spec.sheets).sum::<usize>() + spec.clutter
            ))
        })?;
        // Keep the mean a little inside the band so noise straddles it
        // symmetrically.
        let span = band[1] - band[0];
        let intensity = band[0] + span * rng.random_range(0.15..0.85f32);
        boxes.push(shape.bbox());
        objects.push(PlacedObject {
            class,
            shape,
            intensity,
            voxel_count: 0,
        });
    }

    let n: usize = dims.iter().product();
    let mut clean = vec![AIR_MHU; n];
    let mut labels = vec![0u8; n];
    for obj in &mut objects {
        let vox = obj.shape.voxels(dims);
        obj.voxel_count = vox.len();
        for [z, y, x] in vox {
            let i = (z * dims[1] + y) * dims[2] + x;
            clean[i] = obj.intensity;
            labels[i] = obj.class;
        }
    }
    let data = clean
        .into_iter()
        .map(|v| (v as f64 + noise.sample(&mut rng)).round().clamp(0.0, MAX_MHU as f64) as f32)
        .collect();
    Ok(SynthBag {
        grid: VoxelGrid::new(dims, spec.spacing_mm, data)?,
        labels: LabelVolume::new(dims, labels)?,
        objects,
    })
}

/// Split tag of volume `index` (0-based): the first `train_count` volumes
/// get `train`, or by index parity when no count is given.
pub fn split_for(index: usize, train: Split, train_count: Option<usize>) -> Split {
    match train_count {
        Some(n) if index < n => train,
        Some(_) => train.other(),
        None if (index + 1) % 2 == 1 => Split::Odd,
        None => Split::Even,
    }
}

/// Writes `synth_volumes` bags, their labels, a placed-object list and a
/// manifest into `out_dir`. Returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.synth_volumes);
    let mut all_objects = Vec::with_capacity(cfg.synth_volumes);
    for i in 0..cfg.synth_volumes {
        let spec = SyntheticBagSpec::from_config(cfg, seeds.next_u64());
        let bag = generate_bag(&spec)?;
        let volume = PathBuf::from(format!("bag_{i:03}.vol"));
        let labels = PathBuf::from(format!("bag_{i:03}_gt.lbl"));
        save_volume(&out_dir.join(&volume), &bag.grid)?;
        save_labels(&out_dir.join(&labels), &bag.labels, bag.grid.spacing_mm)?;
        entries.push(ManifestEntry {
            volume,
            labels,
            split: split_for(i, cfg.train_split, cfg.synth_train_count),
        });
        all_objects.push(serde_json::json!({"seed": spec.seed, "objects": bag.objects}));
    }
    let objects_path = out_dir.join("objects.json");
    let text = serde_json::to_string_pretty(&all_objects).map_err(|e| Error::json(&objects_path, e))?;
    fs::write(&objects_path, text + "\n").map_err(|e| Error::io(&objects_path, e))?;
    let manifest = out_dir.join("manifest.json");
    save_manifest(&manifest, &entries)?;
    Ok(manifest)
}
