//! `eval`: scores predictions on the test split against ground truth.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::split_entries;
use super::infer::prediction_paths;
use crate::error::{Error, Result};
use crate::eval::{build_report, DetCounts, ScoreReport, SegCounts};
use crate::postproc::{label_objects, load_detections};
use crate::volume::{load_labels, Sidecar, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model: String,
    pub factor: usize,
    pub split: Split,
    pub volumes: Vec<String>,
    pub scores: ScoreReport,
}

/// Pools segmentation and detection counts over the test split. Every test
/// volume must have a prediction in `pred_dir`.
pub fn evaluate(cfg: &RunConfig, manifest: &Path, pred_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let split = cfg.train_split.other();
    let entries = split_entries(manifest, split)?;
    let mut seg = SegCounts::default();
    let mut det = DetCounts::default();
    let mut names = Vec::with_capacity(entries.len());
    for e in &entries {
        let name = e.name();
        let (_, gt_path) = e.resolve(manifest);
        let (pred_path, det_path) = prediction_paths(pred_dir, &name);
        for p in [&pred_path, &det_path] {
            if !p.exists() {
                return Err(Error::InvalidArgument(format!(
                    "no prediction {} for {name}",
                    p.display()
                )));
            }
        }
        let gt = load_labels(&gt_path)?;
        let pred = load_labels(&pred_path)?;
        seg.add(&pred, &gt)?;
        let spacing = Sidecar::read(&gt_path)?.spacing_mm;
        let gts = label_objects(&gt, spacing, cfg.connectivity);
        let dets = load_detections(&det_path)?;
        det.add(&dets, &gts)?;
        names.push(name);
    }
    Ok(EvalReport {
        config_hash: cfg.hash(),
        model: cfg.model.name().to_string(),
        factor: cfg.factor,
        split,
        volumes: names,
        scores: build_report(&seg, &det, cfg.pfa_mode),
    })
}

/// [`evaluate`], then writes the report as JSON.
pub fn cmd_eval(cfg: &RunConfig, manifest: &Path, pred_dir: &Path, report: &Path) -> Result<EvalReport> {
    let r = evaluate(cfg, manifest, pred_dir)?;
    let text = serde_json::to_string_pretty(&r).map_err(|e| Error::json(report, e))?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(report, text + "\n").map_err(|e| Error::io(report, e))?;
    Ok(r)
}
