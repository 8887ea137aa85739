//! `complexity`: parameter and FLOP totals for the configured model.

use super::config::RunConfig;
use super::data::build_spec;
use crate::error::Result;
use crate::nn::complexity::{complexity, downsampled_dims, ComplexityReport, REFERENCE_DIMS};

/// Cost of the configured model on the reference volume reduced by the
/// configured factor.
pub fn cmd_complexity(cfg: &RunConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let spec = build_spec(cfg)?;
    let dims = downsampled_dims(REFERENCE_DIMS, cfg.factor);
    complexity(&spec, dims, cfg.factor, &cfg.point_cost())
}

pub fn table_header() -> String {
    format!(
        "{:<12} {:>3} {:>6} {:>7} {:>11} {:>11}",
        "model", "L", "fvols", "factor", "params (M)", "FLOPs (G)"
    )
}

pub fn table_row(cfg: &RunConfig, r: &ComplexityReport) -> String {
    let (l, f) = if cfg.model.is_dense() {
        (cfg.levels.to_string(), cfg.fvols.to_string())
    } else {
        ("-".into(), "-".into())
    };
    format!(
        "{:<12} {:>3} {:>6} {:>7} {:>11.2} {:>11.1}",
        cfg.model.name(),
        l,
        f,
        r.factor,
        r.params as f64 / 1e6,
        r.flops as f64 / 1e9
    )
}
