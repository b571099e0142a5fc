//! Differentiable numeric foundation: dense tensors, reverse-mode
//! autodiff, Adam, learning-rate schedules, deterministic random streams,
//! checkpoints, and finite-difference verification.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, ParamStore};
pub use schedule::LrSchedule;
pub use tape::{Gradients, NodeId, NumericError, Tape};
pub use tensor::{Scalar, Tensor};
