pub mod error;
pub mod nn;
pub mod volume;
pub mod cloud;
pub mod postproc;
pub mod eval;
pub mod pipeline;
