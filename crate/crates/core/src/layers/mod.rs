//! Differentiable layers with explicit forward and backward passes.
//!
//! Each layer owns its parameters and their gradients (see [`Param`]) and
//! caches whatever its backward pass needs during a train-mode forward.
//! Gradients are overwritten, not accumulated, by every `backward` call.

mod activation;
mod conv;
mod depthwise;
mod gap;
mod norm;
mod pool;
mod se;

use std::fmt;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub use activation::{relu, softmax_rows, Relu, Softmax};
pub use conv::{conv2d, conv2d_direct, Conv2d, ConvConfig};
pub use depthwise::{depthwise_conv3x3, depthwise_separable, DepthwiseSeparable};
pub use gap::{global_avg_pool, GlobalAvgPool};
pub use norm::{batchnorm, BatchNorm2d, BN_EPS, BN_MOMENTUM};
pub use pool::{
    blur_conv_downsample, blur_downsample, blur_maxpool, maxpool2x2, BlurConvDownsample,
    BlurMaxPool, MaxPool2x2, BLUR_KERNEL,
};
pub use se::{se_latent, squeeze_excite, SqueezeExcite};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}: backward called without a cached train-mode forward")]
    MissingCache(&'static str),
    #[error("{layer}: expected {expected} input channels, got {got}")]
    Channels {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: non-integral output size for {h}x{w} input")]
    OutputSize {
        layer: &'static str,
        h: usize,
        w: usize,
    },
    #[error("{layer}: spatial size {h}x{w} is not even")]
    OddSpatial {
        layer: &'static str,
        h: usize,
        w: usize,
    },
    #[error("batchnorm: eval-mode forward before any train-mode statistics")]
    Uncalibrated,
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

pub type Result<T, E = LayerError> = std::result::Result<T, E>;

/// Role of a parameter tensor. Only [`ParamKind::Weight`] receives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// A learnable tensor and its gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self { value, grad, kind }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Forward/backward contract shared by every layer.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Returns dL/dx and overwrites the parameter gradients.
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        Vec::new()
    }

    /// Non-learnable state that must survive a checkpoint round trip.
    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        Vec::new()
    }

    /// Batch-norm layers contained in this module, in forward order.
    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    DepthwiseSeparable,
    MaxPool2x2,
    BlurMaxPool,
    BlurConvDownsample,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    SqueezeExcite,
    Softmax,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::DepthwiseSeparable => "dwsep",
            LayerKind::MaxPool2x2 => "maxpool",
            LayerKind::BlurMaxPool => "blurmaxpool",
            LayerKind::BlurConvDownsample => "blurconv",
            LayerKind::BatchNorm => "bn",
            LayerKind::Relu => "relu",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::SqueezeExcite => "se",
            LayerKind::Softmax => "softmax",
        };
        f.write_str(s)
    }
}

/// Any layer of the model zoo.
#[derive(Debug, Clone)]
pub enum Layer<T: Scalar = f32> {
    Conv(Conv2d<T>),
    DepthwiseSeparable(DepthwiseSeparable<T>),
    MaxPool(MaxPool2x2),
    BlurMaxPool(BlurMaxPool),
    BlurConvDownsample(BlurConvDownsample<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu),
    GlobalAvgPool(GlobalAvgPool),
    SqueezeExcite(SqueezeExcite<T>),
    Softmax(Softmax<T>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv($l) => $body,
            Layer::DepthwiseSeparable($l) => $body,
            Layer::MaxPool($l) => $body,
            Layer::BlurMaxPool($l) => $body,
            Layer::BlurConvDownsample($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::Relu($l) => $body,
            Layer::GlobalAvgPool($l) => $body,
            Layer::SqueezeExcite($l) => $body,
            Layer::Softmax($l) => $body,
        }
    };
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(c) if c.config().kernel == 1 => LayerKind::Conv1x1,
            Layer::Conv(_) => LayerKind::Conv3x3,
            Layer::DepthwiseSeparable(_) => LayerKind::DepthwiseSeparable,
            Layer::MaxPool(_) => LayerKind::MaxPool2x2,
            Layer::BlurMaxPool(_) => LayerKind::BlurMaxPool,
            Layer::BlurConvDownsample(_) => LayerKind::BlurConvDownsample,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::GlobalAvgPool(_) => LayerKind::GlobalAvgPool,
            Layer::SqueezeExcite(_) => LayerKind::SqueezeExcite,
            Layer::Softmax(_) => LayerKind::Softmax,
        }
    }

    /// Output channel count for layers that define one.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Layer::Conv(c) => Some(c.config().out_channels),
            Layer::DepthwiseSeparable(d) => Some(d.out_channels()),
            Layer::BlurConvDownsample(b) => Some(b.conv().config().out_channels),
            Layer::BatchNorm(b) => Some(b.channels()),
            Layer::SqueezeExcite(s) => Some(s.channels()),
            _ => None,
        }
    }
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        dispatch!(self, l => l.forward(x, mode))
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(dy))
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        dispatch!(self, l => l.params())
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        dispatch!(self, l => l.params_mut())
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        dispatch!(self, l => l.buffers())
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        dispatch!(self, l => l.buffers_mut())
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        dispatch!(self, l => l.batchnorms_mut())
    }
}

/// Kaiming-uniform bound for fan-in initialization of ReLU networks.
pub(crate) fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn check_channels(layer: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(LayerError::Channels {
            layer,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_same_shape<T: Scalar>(
    op: &'static str,
    expected: &[usize],
    got: &Tensor<T>,
) -> Result<()> {
    if got.shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op,
            left: expected.to_vec(),
            right: got.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}
