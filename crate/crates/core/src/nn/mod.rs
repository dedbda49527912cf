//! Dense numeric kernel shared by the language model and the reward network:
//! tensors, a recorded-tape reverse pass, Adam with an optional warmup schedule,
//! L1 weight penalty and the binary checkpoint container.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{add_l1_grad, l1_penalty, noam_lr, softmax, AdamConfig, OptimizerState, Schedule};
pub(crate) use optim::softmax_masked;
pub use params::{Gradients, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Tape, Targets, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
