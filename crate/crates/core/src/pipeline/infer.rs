//! `infer`: segments volumes with a trained checkpoint and extracts
//! detections at full resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::data::{block_tensors, reduce_volume, split_entries, Preprocess};
use super::train::CheckpointMeta;
use crate::cloud::{assemble_block, cloud_to_label_volume, volume_to_cloud};
use crate::error::{Error, Result};
use crate::nn::checkpoint::load_checkpoint;
use crate::nn::infer::{infer_scores, WindowConfig};
use crate::nn::loss::argmax_channels;
use crate::nn::{NetInput, Network, PointCoords, Tensor};
use crate::postproc::{detect, save_detections, DetectionSet};
use crate::volume::{load_volume, save_labels, upsample_labels_by_factor, LabelVolume, VoxelGrid, AIR_MHU};

/// A trained model ready for inference.
pub struct Model {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
}

impl Model {
    /// Loads `checkpoint` and checks it against `cfg`: the architecture
    /// and resolution must agree. Post-processing and windowing settings
    /// come from `cfg`.
    pub fn load(checkpoint: &Path, cfg: &RunConfig) -> Result<Self> {
        let ckpt = load_checkpoint(checkpoint)?;
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", checkpoint.display())))?;
        let t = &meta.config;
        let arch_matches = t.model == cfg.model
            && t.factor == cfg.factor
            && (!cfg.model.is_dense() || (t.levels == cfg.levels && t.fvols == cfg.fvols))
            && (cfg.model.is_dense() || (t.gate_lo == cfg.gate_lo && t.gate_hi == cfg.gate_hi));
        if !arch_matches {
            return Err(Error::Checkpoint(format!(
                "{} was trained as {} L={} fvols={} factor={}, config asks for {} L={} fvols={} factor={}",
                checkpoint.display(),
                t.model.name(),
                t.levels,
                t.fvols,
                t.factor,
                cfg.model.name(),
                cfg.levels,
                cfg.fvols,
                cfg.factor
            )));
        }
        let mut network = Network::new(ckpt.spec.clone(), 0)?;
        network.load_state(&ckpt.tensors)?;
        let mut config = cfg.clone();
        // Point features depend on training-time geometry settings.
        config.block_size = t.block_size;
        config.block_points = t.block_points;
        config.anisotropic_coords = t.anisotropic_coords;
        config.sa_npoint = t.sa_npoint;
        config.sa_radius = t.sa_radius;
        config.sa_nsample = t.sa_nsample;
        config.normalization = t.normalization;
        Ok(Model {
            config,
            meta,
            network,
        })
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.meta.preprocess
    }

    /// Labels at the working resolution of `reduced`.
    pub fn segment_reduced(&self, reduced: &VoxelGrid) -> Result<LabelVolume> {
        if self.config.model.is_dense() {
            self.segment_dense(reduced)
        } else {
            self.segment_points(reduced)
        }
    }

    fn segment_dense(&self, grid: &VoxelGrid) -> Result<LabelVolume> {
        let norm = self.preprocess().normalization(&self.config, grid);
        let data = grid
            .data
            .iter()
            .map(|&v| norm.apply(v))
            .collect::<Result<Vec<_>>>()?;
        let [d, h, w] = grid.dims;
        let input = Tensor::from_vec(&[1, 1, d, h, w], data)?;
        let window = WindowConfig {
            window: self.config.window,
            overlap: self.config.overlap,
        };
        let scores = infer_scores(&self.network, &input, &window, norm.apply(AIR_MHU)?)?;
        LabelVolume::new(grid.dims, argmax_channels(&scores))
    }

    /// Tiles the gated cloud into blocks, predicts every point exactly once
    /// and scatters the labels back.
    fn segment_points(&self, grid: &VoxelGrid) -> Result<LabelVolume> {
        let cfg = &self.config;
        let mut cloud = volume_to_cloud(grid, None, cfg.gate())?;
        let Some(ext) = cloud.extent() else {
            return Ok(LabelVolume::background(grid.dims));
        };
        let size = cfg.block_size;
        let n = cfg.block_points;
        let width = cfg.feature_width();
        // Extent is (x, y, z); block keys and origins are (z, y, x).
        let lo = [ext[2].0 as usize, ext[1].0 as usize, ext[0].0 as usize];
        let mut blocks: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            let zyx = p.zyx();
            let key = std::array::from_fn(|a| (zyx[a] - lo[a]) / size);
            blocks.entry(key).or_default().push(i);
        }
        let mut pred = vec![0u8; cloud.len()];
        for (key, members) in blocks {
            let origin = std::array::from_fn(|a| lo[a] + key[a] * size);
            for chunk in members.chunks(n) {
                let rows: Vec<usize> = chunk.iter().copied().cycle().take(n).collect();
                let block = assemble_block(&cloud, rows, width, origin, size)?;
                let (features, xyz) = block_tensors(cfg, self.preprocess(), &block);
                let input = NetInput {
                    features: Tensor::from_vec(&[1, width as usize, n], features)?,
                    coords: Some(PointCoords::new(n, xyz)),
                };
                let labels = argmax_channels(&self.network.predict(&input)?);
                for (k, &idx) in chunk.iter().enumerate() {
                    pred[idx] = labels[k];
                }
            }
        }
        cloud.labels = Some(pred);
        cloud_to_label_volume(&cloud, grid.dims)
    }

    /// Full pipeline for one volume: reduce, segment, restore full
    /// resolution, detect.
    pub fn infer_volume(&self, grid: &VoxelGrid) -> Result<(LabelVolume, DetectionSet)> {
        let factor = self.config.factor;
        let reduced = reduce_volume(grid, factor)?;
        let low = self.segment_reduced(&reduced)?;
        let labels = if factor == 1 {
            low
        } else {
            upsample_labels_by_factor(&low, factor, grid.dims)?
        };
        let dets = detect(&labels, grid.spacing_mm, &self.config.detect_options());
        Ok((labels, dets))
    }

    /// Differences from the training data worth a warning.
    pub fn warnings(&self, grid: &VoxelGrid) -> Vec<String> {
        let trained = self.preprocess().spacing_mm;
        let factor = self.config.factor as f64;
        let spacing = grid.spacing_mm.map(|s| s * factor);
        let mut out = Vec::new();
        if spacing.iter().zip(trained).any(|(a, b)| (a - b).abs() > 1e-6 * b.abs().max(1.0)) {
            out.push(format!(
                "working spacing {spacing:?} mm differs from training spacing {trained:?} mm"
            ));
        }
        out
    }
}

pub fn prediction_paths(out_dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        out_dir.join(format!("{name}_pred.lbl")),
        out_dir.join(format!("{name}_det.json")),
    )
}

/// One inferred volume.
#[derive(Clone, Debug)]
pub struct InferRecord {
    pub name: String,
    pub labels: PathBuf,
    pub detections: PathBuf,
    pub objects: usize,
    pub warnings: Vec<String>,
}

/// Runs a checkpoint over one `.vol` file, or over the test split of a
/// manifest (`.json`), writing labels and detections into `out_dir`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out_dir: &Path) -> Result<Vec<InferRecord>> {
    cfg.validate()?;
    let model = Model::load(checkpoint, cfg)?;
    let volumes: Vec<(String, PathBuf)> = if input.extension().is_some_and(|e| e == "json") {
        split_entries(input, cfg.train_split.other())?
            .iter()
            .map(|e| (e.name(), e.resolve(input).0))
            .collect()
    } else {
        let name = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into());
        vec![(name, input.to_path_buf())]
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::with_capacity(volumes.len());
    for (name, path) in volumes {
        let grid = load_volume(&path)?;
        let warnings = model.warnings(&grid);
        let (labels, dets) = model.infer_volume(&grid)?;
        let (lp, dp) = prediction_paths(out_dir, &name);
        save_labels(&lp, &labels, grid.spacing_mm)?;
        save_detections(&dp, &dets)?;
        out.push(InferRecord {
            name,
            labels: lp,
            detections: dp,
            objects: dets.detections.len(),
            warnings,
        });
    }
    Ok(out)
}
