//! Differentiable substrate: dense layer stacks, the contrastive encoder,
//! the optimizer and parameter checkpoints. All arithmetic is `f64`.

pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod optim;

pub use encoder::{momentum_update, EncoderDims, EncoderForward, EncoderParams};
pub use layers::{Activation, LayerStack, StackCache};
pub use optim::{sgd_step, CosineSchedule, OptimizerState};
