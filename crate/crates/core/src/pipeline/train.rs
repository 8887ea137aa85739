//! `train`: fits a dense or point model on the training split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{block_tensors, build_spec, gated_cloud, load_sample, split_entries, Preprocess, Sample};
use crate::cloud::{pick_training_block, PointCloud};
use crate::error::{Error, Result};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::{Batch, EpochLog, NetInput, Network, PointCoords, Tensor, TrainState};
use crate::volume::{augment_with, crop, AugmentOptions, CropSpec};

/// Metadata stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub config_hash: String,
    pub preprocess: Preprocess,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub model: String,
    pub config_hash: String,
    pub params: u64,
    pub epochs: Vec<EpochLog>,
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

struct DenseSampler<'a> {
    cfg: &'a RunConfig,
    pre: &'a Preprocess,
    samples: &'a [Sample],
    multiple: usize,
}

impl DenseSampler<'_> {
    fn batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch<f32>> {
        let b = self.cfg.batch_size;
        let mut size = [0; 3];
        for a in 0..3 {
            let largest = self.samples.iter().map(|s| s.grid.dims[a]).max().unwrap_or(1);
            size[a] = self.cfg.crop[a].min(round_up(largest, self.multiple));
        }
        let opts_base = AugmentOptions {
            normalization: crate::volume::Normalization::Identity,
            flip: self.cfg.augment_flip,
            rotate: self.cfg.augment_rotate && size[1] == size[2],
        };
        let vox: usize = size.iter().product();
        let mut features = Vec::with_capacity(b * vox);
        let mut targets = Vec::with_capacity(b * vox);
        for _ in 0..b {
            let s = &self.samples[rng.random_range(0..self.samples.len())];
            let origin: [usize; 3] =
                std::array::from_fn(|a| rng.random_range(0..=s.grid.dims[a].saturating_sub(size[a])));
            let (g, l) = crop(&s.grid, &s.labels, &CropSpec { origin, size })?;
            let opts = AugmentOptions {
                normalization: self.pre.normalization(self.cfg, &s.grid),
                ..opts_base
            };
            let (g, l) = augment_with(&g, &l, rng.next_u64(), &opts)?;
            features.extend_from_slice(&g.data);
            targets.extend_from_slice(&l.data);
        }
        Ok(Batch {
            input: NetInput::dense(Tensor::from_vec(&[b, 1, size[0], size[1], size[2]], features)?),
            targets,
        })
    }
}

struct PointSampler<'a> {
    cfg: &'a RunConfig,
    pre: &'a Preprocess,
    clouds: Vec<&'a PointCloud>,
}

impl PointSampler<'_> {
    fn batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch<f32>> {
        let b = self.cfg.batch_size;
        let sampling = self.cfg.block_sampling();
        let n = sampling.n;
        let w = sampling.width as usize;
        let mut features = vec![0.0f32; b * w * n];
        let mut xyz = Vec::with_capacity(b * n * 3);
        let mut targets = Vec::with_capacity(b * n);
        for bi in 0..b {
            let cloud = self.clouds[rng.random_range(0..self.clouds.len())];
            let block = pick_training_block(cloud, &sampling, rng.next_u64())?;
            let (f, c) = block_tensors(self.cfg, self.pre, &block);
            features[bi * w * n..(bi + 1) * w * n].copy_from_slice(&f);
            xyz.extend(c);
            targets.extend(block.labels.as_ref().expect("labelled cloud"));
        }
        Ok(Batch {
            input: NetInput {
                features: Tensor::from_vec(&[b, w, n], features)?,
                coords: Some(PointCoords::new(n, xyz)),
            },
            targets,
        })
    }
}

/// Trains per `cfg` on the manifest's training split, writes the checkpoint
/// and a JSON log next to it, and returns the per-epoch log. `progress` is
/// called after every epoch.
pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    checkpoint: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    let spec = build_spec(cfg)?;
    let entries = split_entries(manifest, cfg.train_split)?;
    let samples = entries
        .iter()
        .map(|e| load_sample(manifest, e, cfg.factor))
        .collect::<Result<Vec<_>>>()?;

    let clouds = if cfg.model.is_dense() {
        None
    } else {
        Some(
            samples
                .iter()
                .map(|s| gated_cloud(cfg, s, true))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let pre = Preprocess::fit(cfg, &samples, clouds.as_deref());
    let weights = pre.class_weights.clone();

    let network = Network::<f32>::new(spec.clone(), cfg.seed)?;
    let params = network.param_count() as u64;
    let mut state = TrainState::new(network, cfg.optimizer, cfg.seed);
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let steps = cfg.samples_per_epoch.div_ceil(cfg.batch_size);

    let dense = DenseSampler {
        cfg,
        pre: &pre,
        samples: &samples,
        multiple: spec.spatial_multiple.max(1),
    };
    let point = clouds.as_ref().map(|cs| PointSampler {
        cfg,
        pre: &pre,
        clouds: cs.iter().filter(|c| !c.is_empty()).collect(),
    });
    if let Some(p) = &point {
        if p.clouds.is_empty() {
            return Err(Error::Sampling(
                "no training volume has voxels inside the gate".into(),
            ));
        }
    }

    for _ in 0..cfg.epochs {
        let rng = &mut rng;
        let batches = (0..steps).map(|_| match &point {
            Some(p) => p.batch(rng),
            None => dense.batch(rng),
        });
        let log = state.train_epoch(&schedule, batches, weights.as_deref())?;
        progress(&log);
    }

    let meta = CheckpointMeta {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        preprocess: pre,
        history: state.history.clone(),
    };
    let meta_json = serde_json::to_value(&meta).map_err(|e| Error::json(checkpoint, e))?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(checkpoint, &spec, &meta_json, &state.network.state())?;

    let log = TrainLog {
        model: cfg.model.name().to_string(),
        config_hash: meta.config_hash,
        params,
        epochs: state.history,
    };
    let path = log_path(checkpoint);
    let text = serde_json::to_string_pretty(&log).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(log)
}
