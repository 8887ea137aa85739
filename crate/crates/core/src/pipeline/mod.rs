//! End-to-end orchestration behind the command-line tool.

pub mod complexity;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod export;
pub mod infer;
pub mod synth;
pub mod train;

pub use complexity::cmd_complexity;
pub use config::{ClassWeighting, ModelKind, NormalizationKind, RunConfig};
pub use evaluate::{cmd_eval, evaluate, EvalReport};
pub use export::{cmd_export_slices, Axis};
pub use infer::{cmd_infer, InferRecord, Model};
pub use synth::{cmd_synth, generate_bag, SynthBag, SyntheticBagSpec};
pub use train::{cmd_train, CheckpointMeta, TrainLog};
