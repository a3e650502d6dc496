//! A small CNN framework for building and training parameter-efficient
//! image classifiers.
//!
//! The crate covers the full path from raw dataset files to a benchmark row:
//!
//! - [`tensor`] and [`rng`]: dense `f32`/`f64` arrays and seeded randomness.
//! - [`layers`]: convolution, depthwise-separable convolution, max pooling and
//!   its anti-aliased (blur) variant, batch norm, global average pooling,
//!   squeeze-excite and softmax, each with a hand-written backward pass.
//! - [`regularizers`]: cutout, mixup, label smoothing and soft-target cross-entropy.
//! - [`optim`]: SGD with momentum, one-cycle learning rate, SAM and SWA.
//! - [`zoo`]: the eight reference architectures with exact parameter counts,
//!   architecture transforms, and the checkpoint format.
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders and batch iteration.
//! - [`train`] and [`bench`]: the experiment runner and latency harness.
//!
//! [`gradcheck`] provides central finite-difference checks for any layer.

pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use layers::{Layer, LayerError, LayerKind, Mode, Module, Param, ParamKind};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor, TensorError};
