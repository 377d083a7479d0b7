//! Small differentiable kernel stack: tensors, layers with explicit backward
//! passes, a parameter store with an adaptive-moment optimizer, finite-difference
//! gradient verification and binary checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod sequential;
pub mod store;
pub mod tensor;

pub use gradcheck::{grad_check, Differentiable, GradCheckConfig, GradCheckReport};
pub use layers::LayerSpec;
pub use sequential::{Sequential, Trace};
pub use store::{
    optimizer_step, GroupRates, OptimizerConfig, OptimizerKind, Param, ParamGroup, ParamId,
    ParamStore,
};
pub use tensor::{Real, Tensor};
