//! Run configuration: a flat TOML key-value file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{BlockSampling, FeatureWidth, Gate};
use crate::error::{Error, Result};
use crate::eval::PfaMode;
use crate::nn::complexity::PointCostModel;
use crate::nn::{OptimizerKind, Pointnet2Config, StepSchedule};
use crate::postproc::{Connectivity, DetectOptions, StructuringElement};
use crate::volume::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unet3d,
    ResUnet3d,
    Pointnet,
    Pointnet2,
}

impl ModelKind {
    pub fn is_dense(self) -> bool {
        matches!(self, ModelKind::Unet3d | ModelKind::ResUnet3d)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Unet3d => "unet3d",
            ModelKind::ResUnet3d => "res_unet3d",
            ModelKind::Pointnet => "pointnet",
            ModelKind::Pointnet2 => "pointnet2",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet3d" => Ok(ModelKind::Unet3d),
            "res_unet3d" => Ok(ModelKind::ResUnet3d),
            "pointnet" => Ok(ModelKind::Pointnet),
            "pointnet2" => Ok(ModelKind::Pointnet2),
            other => Err(Error::Config(format!(
                "model {other:?} not in unet3d, res_unet3d, pointnet, pointnet2"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    /// Fixed mean/std measured on the training split.
    TrainingSet,
    PerVolume,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
    SqrtInverseFrequency,
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub levels: usize,
    pub fvols: usize,
    pub factor: usize,
    pub seed: u64,
    pub train_split: Split,

    pub gate_lo: f32,
    pub gate_hi: f32,
    /// Scale point coordinates by voxel spacing (relative to the in-plane
    /// spacing) before grouping.
    pub anisotropic_coords: bool,

    pub se_radius: usize,
    pub connectivity: Connectivity,
    pub min_voxels: usize,

    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Initial rate; defaults per model family when unset.
    pub lr: Option<f64>,
    pub lr_gamma: Option<f64>,
    pub lr_step_epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub crop: [usize; 3],
    pub normalization: NormalizationKind,
    pub class_weights: ClassWeighting,
    pub augment_flip: bool,
    pub augment_rotate: bool,

    pub window: [usize; 3],
    pub overlap: f64,

    pub block_size: usize,
    pub block_points: usize,
    pub retry_budget: usize,
    pub sa_npoint: [usize; 4],
    pub sa_radius: [f64; 4],
    pub sa_nsample: usize,
    pub point_occupancy: f64,

    pub pfa_mode: PfaMode,

    pub synth_volumes: usize,
    pub synth_dims: [usize; 3],
    pub synth_spacing_mm: [f64; 3],
    /// First `synth_train_count` volumes get the training tag; unset means
    /// odd/even by index.
    pub synth_train_count: Option<usize>,
    /// Ellipsoids per material (saline, rubber, clay).
    pub synth_blobs: [usize; 3],
    /// Curved sheets per material (saline, rubber, clay).
    pub synth_sheets: [usize; 3],
    pub synth_clutter: usize,
    pub synth_noise: f64,
    pub synth_saline: [f32; 2],
    pub synth_rubber: [f32; 2],
    pub synth_clay: [f32; 2],
    pub synth_benign: [f32; 2],
    pub synth_gap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Unet3d,
            levels: 4,
            fvols: 32,
            factor: 4,
            seed: 0,
            train_split: Split::Odd,
            gate_lo: 600.0,
            gate_hi: 32767.0,
            anisotropic_coords: false,
            se_radius: 1,
            connectivity: Connectivity::Corner,
            min_voxels: 64,
            optimizer: OptimizerKind::Adam,
            epochs: 250,
            lr: None,
            lr_gamma: None,
            lr_step_epochs: 50,
            batch_size: 16,
            samples_per_epoch: 64,
            crop: [64, 96, 96],
            normalization: NormalizationKind::PerVolume,
            class_weights: ClassWeighting::InverseFrequency,
            augment_flip: true,
            augment_rotate: true,
            window: [64, 96, 96],
            overlap: 0.5,
            block_size: 48,
            block_points: 8092,
            retry_budget: 64,
            sa_npoint: [1024, 256, 64, 16],
            sa_radius: [4.0, 8.0, 16.0, 32.0],
            sa_nsample: 32,
            point_occupancy: 0.30,
            pfa_mode: PfaMode::PerDetection,
            synth_volumes: 8,
            synth_dims: [96, 96, 96],
            synth_spacing_mm: [1.5, 0.928, 0.928],
            synth_train_count: None,
            synth_blobs: [2, 1, 2],
            synth_sheets: [0, 1, 0],
            synth_clutter: 2,
            synth_noise: 30.0,
            synth_saline: [1000.0, 1150.0],
            synth_rubber: [1200.0, 1400.0],
            synth_clay: [1700.0, 2000.0],
            synth_benign: [300.0, 900.0],
            synth_gap: 6,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if ![1, 2, 4, 8].contains(&self.factor) {
            return fail(format!("factor {} not in {{1, 2, 4, 8}}", self.factor));
        }
        if self.model.is_dense() && (self.levels < 2 || self.fvols == 0) {
            return fail(format!(
                "levels {} / fvols {} invalid (need levels >= 2, fvols >= 1)",
                self.levels, self.fvols
            ));
        }
        self.gate().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_epoch == 0 {
            return fail("epochs, batch_size and samples_per_epoch must be positive".into());
        }
        self.schedule().validate()?;
        if self.crop.contains(&0) || self.window.contains(&0) {
            return fail("crop and window sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return fail(format!("overlap {} not in [0, 1)", self.overlap));
        }
        if self.block_size == 0 || self.block_points == 0 {
            return fail("block_size and block_points must be positive".into());
        }
        self.pointnet2()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.model == ModelKind::Pointnet2 && self.block_points < self.sa_npoint[0] {
            return fail(format!(
                "block_points {} fewer than sa_npoint[0] {}",
                self.block_points, self.sa_npoint[0]
            ));
        }
        if !(0.0..=1.0).contains(&self.point_occupancy) {
            return fail("point_occupancy must lie in [0, 1]".into());
        }
        if self.synth_dims.contains(&0) || self.synth_spacing_mm.iter().any(|&s| s <= 0.0) {
            return fail("synthetic dims and spacing must be positive".into());
        }
        if let Some(n) = self.synth_train_count {
            if n > self.synth_volumes {
                return fail(format!(
                    "synth_train_count {n} exceeds synth_volumes {}",
                    self.synth_volumes
                ));
            }
        }
        let bands = [
            ("saline", self.synth_saline),
            ("rubber", self.synth_rubber),
            ("clay", self.synth_clay),
            ("benign", self.synth_benign),
        ];
        for (name, [lo, hi]) in bands {
            if !(0.0 <= lo && lo <= hi && hi <= 32767.0) {
                return fail(format!("{name} band [{lo}, {hi}] invalid"));
            }
        }
        let mut sorted = bands.to_vec();
        sorted.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
        for w in sorted.windows(2) {
            if w[0].1[1] >= w[1].1[0] {
                return fail(format!("bands {} and {} overlap", w[0].0, w[1].0));
            }
        }
        for (name, [lo, _]) in &bands[..3] {
            if *lo < self.gate_lo {
                return fail(format!("{name} band lies below the gate"));
            }
        }
        if !(self.synth_noise >= 0.0) {
            return fail("synth_noise must be non-negative".into());
        }
        Ok(())
    }

    pub fn gate(&self) -> Gate {
        Gate {
            lo: self.gate_lo,
            hi: self.gate_hi,
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        let base = if self.model.is_dense() {
            StepSchedule::dense()
        } else {
            StepSchedule::point()
        };
        StepSchedule {
            lr0: self.lr.unwrap_or(base.lr0),
            gamma: self.lr_gamma.unwrap_or(base.gamma),
            step_epochs: self.lr_step_epochs,
            epochs: self.epochs,
        }
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            se: StructuringElement::cube(self.se_radius),
            connectivity: self.connectivity,
            min_voxels: self.min_voxels,
        }
    }

    pub fn pointnet2(&self) -> Pointnet2Config {
        Pointnet2Config {
            npoint: self.sa_npoint,
            radius: self.sa_radius,
            nsample: self.sa_nsample,
        }
    }

    pub fn feature_width(&self) -> FeatureWidth {
        match self.model {
            ModelKind::Pointnet2 => FeatureWidth::Seven,
            _ => FeatureWidth::Four,
        }
    }

    pub fn block_sampling(&self) -> BlockSampling {
        BlockSampling {
            size: self.block_size,
            n: self.block_points,
            width: self.feature_width(),
            retry_budget: self.retry_budget,
        }
    }

    pub fn point_cost(&self) -> PointCostModel {
        PointCostModel {
            block_points: self.block_points,
            occupancy: self.point_occupancy,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}
