//! A small CPU tensor engine: 3-D convolutional and point-set layers with
//! reverse-mode gradients, generic over `f32` and `f64`.

pub mod arch;
pub mod checkpoint;
pub mod complexity;
pub mod conv;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod point;
pub mod scalar;
pub mod spec;
pub mod tensor;
pub mod train;

pub use arch::{build_pointnet, build_pointnet2, build_residual_unet3d, build_unet3d, Pointnet2Config};
pub use graph::{Mode, NetInput, Network, Param, Trace};
pub use optim::{Optimizer, OptimizerKind, StepSchedule};
pub use point::PointCoords;
pub use scalar::Scalar;
pub use spec::{LayerSpec, Layout, NetworkSpec, Node, Shape, SpecBuilder};
pub use tensor::Tensor;
pub use train::{Batch, EpochLog, TrainState};
