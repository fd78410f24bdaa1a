//! U-Net construction, layer kernels and checkpoints.

pub mod checkpoint;
pub mod ops;
pub mod tensor;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use ops::{blur_kernel, max_blur_pool, max_pool};
pub use tensor::Tensor;
pub use unet::{Grads, ModelConfig, Param, PoolingKind, Tape, UNet};
