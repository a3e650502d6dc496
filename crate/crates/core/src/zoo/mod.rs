//! The eight reference architectures, their transforms, and checkpoints.
//!
//! Conventions that match the declared parameter totals exactly:
//!
//! - MNIST: no conv biases; batch norm after every 3×3 and depthwise-separable
//!   conv, none after 1×1 transitions or the classifier.
//! - CIFAR: every conv except the classifier has a bias (both stages of a
//!   depthwise-separable block), batch norm after the block output only.
//!
//! ReLU follows every batch norm. All models end GAP → 1×1 classifier → softmax.

pub mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    se_latent, BatchNorm2d, BlurConvDownsample, BlurMaxPool, Conv2d, ConvConfig, DepthwiseSeparable,
    GlobalAvgPool, Layer, LayerError, MaxPool2x2, Mode, Module, Param, Relu, Softmax, SqueezeExcite,
};
use crate::regularizers::argmax_rows;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{checkpoint_size, load, load_from_bytes, model_size_bytes, save, to_bytes, CheckpointError, MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("invalid architecture name '{0}'")]
    BadVariant(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T, E = ZooError> = std::result::Result<T, E>;

pub const MODEL_NAMES: [&str; 8] = [
    "mnist-25k",
    "mnist-7k",
    "mnist-7k-dw",
    "mnist-5k",
    "mnist-5k-dw",
    "mnist-1.5k-dw",
    "cifar-143k",
    "cifar-143k-dw",
];

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Conv3x3,
    ConvDW,
    Transition1x1,
    MaxPool,
    Gap,
    Classifier1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub followed_by_bn: bool,
    pub followed_by_relu: bool,
}

impl BlockDesc {
    fn new(kind: BlockKind, in_ch: usize, out_ch: usize) -> Self {
        let normed = matches!(kind, BlockKind::Conv3x3 | BlockKind::ConvDW);
        Self {
            kind,
            in_ch,
            out_ch,
            followed_by_bn: normed,
            followed_by_relu: normed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasConvention {
    None,
    AllNonClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub blocks: Vec<BlockDesc>,
    pub conv_bias: BiasConvention,
    pub input_shape: [usize; 3],
    /// Declared parameter total.
    pub declared_params: usize,
}

impl ArchSpec {
    /// Parameter total implied by the block list alone.
    pub fn computed_params(&self) -> usize {
        let bias = self.conv_bias == BiasConvention::AllNonClassifier;
        self.blocks
            .iter()
            .map(|b| {
                let conv = match b.kind {
                    BlockKind::Conv3x3 => ConvConfig::new(b.in_ch, b.out_ch, 3).with_bias(bias).param_count(),
                    BlockKind::ConvDW => DepthwiseSeparable::<f32>::count_for(b.in_ch, b.out_ch, bias),
                    BlockKind::Transition1x1 => ConvConfig::new(b.in_ch, b.out_ch, 1).with_bias(bias).param_count(),
                    BlockKind::Classifier1x1 => b.in_ch * b.out_ch,
                    BlockKind::MaxPool | BlockKind::Gap => 0,
                };
                conv + if b.followed_by_bn { 2 * b.out_ch } else { 0 }
            })
            .sum()
    }

    pub fn conv_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !matches!(b.kind, BlockKind::MaxPool | BlockKind::Gap))
            .count()
    }
}

pub fn arch_spec(name: &str) -> Result<ArchSpec> {
    use BlockKind::*;
    let c3 = |i, o| BlockDesc::new(Conv3x3, i, o);
    let dw = |i, o| BlockDesc::new(ConvDW, i, o);
    let tb = |i, o| BlockDesc::new(Transition1x1, i, o);
    let pool = |c| BlockDesc::new(MaxPool, c, c);
    let gap = |c| BlockDesc::new(Gap, c, c);
    let cls = |i| BlockDesc::new(Classifier1x1, i, NUM_CLASSES);

    let (blocks, declared) = match name {
        "mnist-25k" => (vec![c3(1, 8), c3(8, 16), pool(16), c3(16, 32), c3(32, 64), pool(64), gap(64), cls(64)], 25_144),
        "mnist-7k" => (
            vec![
                c3(1, 8), c3(8, 12), tb(12, 8), pool(8),
                c3(8, 12), c3(12, 16), tb(16, 12), pool(12),
                c3(12, 15), c3(15, 15), gap(15), cls(15),
            ],
            7_767,
        ),
        "mnist-7k-dw" => (
            vec![
                c3(1, 10), dw(10, 12), tb(12, 10), pool(10),
                c3(10, 13), c3(13, 16), tb(16, 12), pool(12),
                c3(12, 15), c3(15, 15), gap(15), cls(15),
            ],
            7_611,
        ),
        "mnist-5k" => (
            vec![
                c3(1, 8), c3(8, 12), tb(12, 8), pool(8),
                c3(8, 12), c3(12, 16), tb(16, 12), pool(12),
                c3(12, 15), gap(15), cls(15),
            ],
            5_712,
        ),
        "mnist-5k-dw" => (
            vec![
                c3(1, 8), dw(8, 12), tb(12, 8), pool(8),
                c3(8, 13), c3(13, 18), tb(18, 12), pool(12),
                c3(12, 16), gap(16), cls(16),
            ],
            5_616,
        ),
        "mnist-1.5k-dw" => (
            vec![
                c3(1, 8), dw(8, 12), tb(12, 8), pool(8),
                dw(8, 12), dw(12, 16), tb(16, 12), pool(12),
                dw(12, 15), gap(15), cls(15),
            ],
            1_560,
        ),
        "cifar-143k" => (
            vec![
                c3(3, 16), c3(16, 16), pool(16),
                c3(16, 32), c3(32, 32), pool(32),
                c3(32, 64), c3(64, 64), pool(64),
                c3(64, 120), gap(120), cls(120),
            ],
            143_208,
        ),
        "cifar-143k-dw" => (
            vec![
                c3(3, 16), c3(16, 16), pool(16),
                dw(16, 32), c3(32, 32), pool(32),
                dw(32, 64), c3(64, 64), pool(64),
                dw(64, 128), dw(128, 192), dw(192, 260), gap(260), cls(260),
            ],
            143_396,
        ),
        _ => return Err(ZooError::UnknownModel(name.to_string())),
    };
    let cifar = name.starts_with("cifar");
    Ok(ArchSpec {
        name: name.to_string(),
        blocks,
        conv_bias: if cifar { BiasConvention::AllNonClassifier } else { BiasConvention::None },
        input_shape: if cifar { [3, 32, 32] } else { [1, 28, 28] },
        declared_params: declared,
    })
}

/// Declared parameter total for a base model name.
pub fn declared_params(name: &str) -> Result<usize> {
    Ok(arch_spec(name)?.declared_params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeSettings {
    pub ratio: usize,
    pub min_channels: usize,
}

impl Default for SeSettings {
    fn default() -> Self {
        Self {
            ratio: 4,
            min_channels: 8,
        }
    }
}

/// Technique transforms applied on top of a base architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variants {
    pub blurpool: bool,
    pub se: Option<SeSettings>,
}

/// Full architecture identifier: `base[+bp][+se<r>/<min>]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchName {
    pub base: String,
    pub variants: Variants,
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.base)?;
        if self.variants.blurpool {
            f.write_str("+bp")?;
        }
        if let Some(se) = self.variants.se {
            write!(f, "+se{}/{}", se.ratio, se.min_channels)?;
        }
        Ok(())
    }
}

impl std::str::FromStr for ArchName {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let base = parts.next().unwrap_or_default();
        arch_spec(base)?;
        let mut variants = Variants::default();
        for p in parts {
            if p == "bp" && !variants.blurpool {
                variants.blurpool = true;
            } else if let Some(rest) = p.strip_prefix("se").filter(|_| variants.se.is_none()) {
                let (r, m) = rest.split_once('/').ok_or_else(|| ZooError::BadVariant(s.to_string()))?;
                let parse = |v: &str| v.parse::<usize>().map_err(|_| ZooError::BadVariant(s.to_string()));
                let (ratio, min_channels) = (parse(r)?, parse(m)?);
                if ratio == 0 || min_channels == 0 {
                    return Err(ZooError::BadVariant(s.to_string()));
                }
                variants.se = Some(SeSettings { ratio, min_channels });
            } else {
                return Err(ZooError::BadVariant(s.to_string()));
            }
        }
        Ok(Self {
            base: base.to_string(),
            variants,
        })
    }
}

/// A sequential network ending in a softmax.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    spec: ArchSpec,
    variants: Variants,
    layers: Vec<Layer<T>>,
}

/// Builds a base architecture with seeded Kaiming-uniform weights.
pub fn build_model<T: Scalar>(name: &str, rng: &mut Rng) -> Result<Model<T>> {
    let spec = arch_spec(name)?;
    let bias = spec.conv_bias == BiasConvention::AllNonClassifier;
    let mut layers = Vec::new();
    for b in &spec.blocks {
        match b.kind {
            BlockKind::Conv3x3 => layers.push(Layer::Conv(Conv2d::new(
                ConvConfig::new(b.in_ch, b.out_ch, 3).with_bias(bias),
                rng,
            )?)),
            BlockKind::ConvDW => layers.push(Layer::DepthwiseSeparable(DepthwiseSeparable::new(
                b.in_ch, b.out_ch, bias, rng,
            )?)),
            BlockKind::Transition1x1 => layers.push(Layer::Conv(Conv2d::new(
                ConvConfig::new(b.in_ch, b.out_ch, 1).with_bias(bias),
                rng,
            )?)),
            BlockKind::MaxPool => layers.push(Layer::MaxPool(MaxPool2x2::new())),
            BlockKind::Gap => layers.push(Layer::GlobalAvgPool(GlobalAvgPool::new())),
            BlockKind::Classifier1x1 => {
                layers.push(Layer::Conv(Conv2d::new(ConvConfig::new(b.in_ch, b.out_ch, 1), rng)?))
            }
        }
        if b.followed_by_bn {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(b.out_ch)));
        }
        if b.followed_by_relu {
            layers.push(Layer::Relu(Relu::new()));
        }
    }
    layers.push(Layer::Softmax(Softmax::new()));
    Ok(Model {
        spec,
        variants: Variants::default(),
        layers,
    })
}

/// Builds a base architecture and applies the variants encoded in `name`.
pub fn build_named<T: Scalar>(name: &str, rng: &mut Rng) -> Result<Model<T>> {
    let arch: ArchName = name.parse()?;
    let mut model = build_model(&arch.base, rng)?;
    if arch.variants.blurpool {
        model = apply_blurpool(model)?;
    }
    if let Some(se) = arch.variants.se {
        model = apply_se(model, se, rng)?;
    }
    Ok(model)
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.param_count()
}

/// Replaces every max pool with its blurred form and every stride-2 conv with
/// a stride-1 conv plus blur downsampling. Parameter count is unchanged.
pub fn apply_blurpool<T: Scalar>(mut model: Model<T>) -> Result<Model<T>> {
    let layers = std::mem::take(&mut model.layers);
    model.layers = layers
        .into_iter()
        .map(|l| {
            Ok(match l {
                Layer::MaxPool(_) => Layer::BlurMaxPool(BlurMaxPool::new()),
                Layer::Conv(c) if c.config().stride == 2 => Layer::BlurConvDownsample(BlurConvDownsample::from_conv(c)?),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    model.variants.blurpool = true;
    Ok(model)
}

/// Inserts a squeeze-excite block after the activation of every 3×3 and
/// depthwise-separable block.
pub fn apply_se<T: Scalar>(mut model: Model<T>, se: SeSettings, rng: &mut Rng) -> Result<Model<T>> {
    if model.variants.se.is_some() {
        return Err(ZooError::BadVariant(format!("{} already has squeeze-excite", model.name())));
    }
    let layers = std::mem::take(&mut model.layers);
    let mut out = Vec::with_capacity(layers.len() + 8);
    let mut last_bn = None;
    for l in layers {
        let after_relu = match &l {
            Layer::BatchNorm(bn) => {
                last_bn = Some(bn.channels());
                None
            }
            Layer::Relu(_) => last_bn.take(),
            _ => {
                last_bn = None;
                None
            }
        };
        out.push(l);
        if let Some(c) = after_relu {
            let latent = se_latent(c, se.ratio, se.min_channels);
            out.push(Layer::SqueezeExcite(SqueezeExcite::new(c, latent, rng)?));
        }
    }
    model.layers = out;
    model.variants.se = Some(se);
    Ok(model)
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn variants(&self) -> Variants {
        self.variants
    }

    pub fn arch_name(&self) -> ArchName {
        ArchName {
            base: self.spec.name.clone(),
            variants: self.variants,
        }
    }

    pub fn name(&self) -> String {
        self.arch_name().to_string()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn body_len(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax(_)) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Runs everything except the final softmax and returns `[N, K]` logits.
    pub fn forward_logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, LayerError> {
        let body = self.body_len();
        let mut h = x.clone();
        for l in &mut self.layers[..body] {
            h = l.forward(&h, mode)?;
        }
        let n = h.shape()[0];
        let k = h.len() / n;
        Ok(h.into_shape(&[n, k])?)
    }

    /// Backward from dL/dlogits through everything except the softmax.
    pub fn backward_logits(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let [n, k] = dlogits.dims2("backward_logits")?;
        let body = self.body_len();
        let mut g = dlogits.reshape(&[n, k, 1, 1])?;
        for l in self.layers[..body].iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    /// Eval-mode class predictions.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>, LayerError> {
        let logits = self.forward_logits(x, Mode::Eval)?;
        let k = logits.shape()[1];
        Ok(argmax_rows(logits.data(), k))
    }

    /// Named parameters in a stable order: `<layer index>.<kind>.<param>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (n, p) in l.params() {
                out.push((format!("{i}.{}.{n}", l.kind()), p));
            }
        }
        out
    }

    /// Every tensor a checkpoint stores: parameters then buffers, per layer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (n, p) in l.params() {
                out.push((format!("{i}.{}.{n}", l.kind()), &p.value));
            }
            for (n, b) in l.buffers() {
                out.push((format!("{i}.{}.{n}", l.kind()), b));
            }
        }
        out
    }

    /// Visits every checkpointed tensor mutably, in [`Model::named_tensors`] order.
    pub(crate) fn visit_tensors_mut<E>(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>) -> Result<(), E>) -> Result<(), E> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let kind = l.kind();
            for (n, p) in l.params_mut() {
                f(&format!("{i}.{kind}.{n}"), &mut p.value)?;
            }
            for (n, b) in l.buffers_mut() {
                f(&format!("{i}.{kind}.{n}"), b)?;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, LayerError> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        self.layers.iter_mut().flat_map(|l| l.batchnorms_mut()).collect()
    }
}
