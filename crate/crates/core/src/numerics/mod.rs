//! Dense f64 tensors, reverse-mode differentiation, and optimization.

pub mod checkpoint;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{adam_update, Adam, AdamConfig, AdamState, LrSchedule, Momentum, Optimizer, OptimizerConfig};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
