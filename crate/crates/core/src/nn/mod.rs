//! Minimal differentiable operator set: tensors, a reverse-mode tape, a
//! finite-difference gradient checker, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
