//! Shared convolutional backbone producing a five-level feature pyramid.
//!
//! The full profile is a 32×4d grouped-residual network with 101 layers whose
//! classification head (everything after the fourth stage) is absent; its taps
//! are the stem and the four residual stages. The tiny profile is five
//! stride-2 Conv-BN-ReLU stages with configurable widths, small enough to
//! train on a CPU.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, Ctx, Init, ParamStore, Scope};
use crate::ops::Conv2dOpts;
use crate::scalar::Scalar;

pub const NUM_LEVELS: usize = 5;
/// Downsampling factor of each level, shallow to deep.
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [2, 4, 8, 16, 32];
/// Channel widths of the full-profile taps, shallow to deep.
pub const FULL_CHANNELS: [usize; NUM_LEVELS] = [64, 256, 512, 1024, 2048];
pub const DEFAULT_TINY_CHANNELS: [usize; NUM_LEVELS] = [8, 16, 32, 64, 128];

/// Parameter-name prefix of every backbone tensor.
pub const ENCODER_PREFIX: &str = "encoder";

const RESNEXT_GROUPS: usize = 32;
const RESNEXT_BASE_WIDTH: usize = 4;
const RESNEXT_101_BLOCKS: [usize; 4] = [3, 4, 23, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Tiny,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            other => Err(Error::InvalidBackbone(format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub profile: Profile,
    pub level_channels: Vec<usize>,
    pub level_strides: Vec<usize>,
    pub weights_source: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            level_channels: FULL_CHANNELS.to_vec(),
            level_strides: LEVEL_STRIDES.to_vec(),
            weights_source: None,
        }
    }

    pub fn tiny(channels: &[usize]) -> Self {
        Self {
            profile: Profile::Tiny,
            level_channels: channels.to_vec(),
            level_strides: LEVEL_STRIDES.to_vec(),
            weights_source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() != NUM_LEVELS {
            return Err(Error::InvalidBackbone(format!(
                "expected {NUM_LEVELS} levels, got {}",
                self.level_channels.len()
            )));
        }
        if self.level_strides != LEVEL_STRIDES {
            return Err(Error::InvalidBackbone(format!(
                "level strides must be {LEVEL_STRIDES:?}, got {:?}",
                self.level_strides
            )));
        }
        if self.level_channels.contains(&0) {
            return Err(Error::InvalidBackbone("level channels must be positive".into()));
        }
        match self.profile {
            Profile::Full if self.level_channels != FULL_CHANNELS => Err(Error::InvalidBackbone(format!(
                "full profile has fixed channels {FULL_CHANNELS:?}, got {:?}",
                self.level_channels
            ))),
            Profile::Tiny if self.weights_source.is_some() => Err(Error::PretrainedUnsupported),
            _ => Ok(()),
        }
    }
}

/// Static description of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelMeta {
    pub channels: usize,
    pub stride: usize,
    /// Input rescaling factor the level was computed from.
    pub source_scale: f64,
}

/// Five per-level feature maps, shallow (stride 2) to deep (stride 32).
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Var<T>>,
    pub meta: Vec<LevelMeta>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Spatial size `(h, w)` of every level.
    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.dims4().2, l.dims4().3)).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims4().1).collect()
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Scalar>(s: &mut Scope<'_, T>, in_ch: usize, planes: usize, stride: usize) -> Self {
        let width = planes * RESNEXT_BASE_WIDTH / 64 * RESNEXT_GROUPS;
        let out = planes * 4;
        let conv1 = ConvBnRelu::new(&mut s.sub("conv1"), in_ch, width, 1, Conv2dOpts::default());
        let conv2 = ConvBnRelu::new(
            &mut s.sub("conv2"),
            width,
            width,
            3,
            Conv2dOpts::same(3).with_stride(stride).with_groups(RESNEXT_GROUPS),
        );
        let conv3 = Conv2d::new(&mut s.sub("conv3"), width, out, 1, Conv2dOpts::default(), false, Init::KaimingFanIn);
        let bn3 = BatchNorm2d::new(&mut s.sub("bn3"), out);
        let downsample = (stride != 1 || in_ch != out).then(|| {
            let mut d = s.sub("downsample");
            let conv = Conv2d::new(&mut d.sub("conv"), in_ch, out, 1, Conv2dOpts::default().with_stride(stride), false, Init::KaimingFanIn);
            let bn = BatchNorm2d::new(&mut d.sub("bn"), out);
            (conv, bn)
        });
        Self { conv1, conv2, conv3, bn3, downsample }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Var<T> {
        let y = self.conv1.forward(ctx, x);
        let y = self.conv2.forward(ctx, &y);
        let y = self.bn3.forward(ctx, &self.conv3.forward(ctx, &y));
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(ctx, &conv.forward(ctx, x)),
            None => x.clone(),
        };
        y.add(&identity).relu()
    }
}

#[derive(Clone, Debug)]
struct ResNeXt {
    stem: ConvBnRelu,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNeXt {
    fn new<T: Scalar>(s: &mut Scope<'_, T>) -> Self {
        let stem = ConvBnRelu::new(&mut s.sub("stem"), 3, 64, 7, Conv2dOpts::same(7).with_stride(2));
        let mut in_ch = 64;
        let mut stages = Vec::new();
        for (i, &blocks) in RESNEXT_101_BLOCKS.iter().enumerate() {
            let planes = 64 << i;
            let stride = if i == 0 { 1 } else { 2 };
            let mut layer = s.sub(&format!("layer{}", i + 1));
            let stage: Vec<Bottleneck> = (0..blocks)
                .map(|b| {
                    let block = Bottleneck::new(&mut layer.sub(&b.to_string()), in_ch, planes, if b == 0 { stride } else { 1 });
                    in_ch = planes * 4;
                    block
                })
                .collect();
            stages.push(stage);
        }
        Self { stem, stages }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Vec<Var<T>> {
        let stem = self.stem.forward(ctx, x);
        let mut taps = vec![stem.clone()];
        let mut y = stem.max_pool2d(3, 2, 1);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(ctx, &y);
            }
            taps.push(y.clone());
        }
        taps
    }
}

#[derive(Clone, Debug)]
enum Body {
    Full(ResNeXt),
    Tiny(Vec<ConvBnRelu>),
}

/// The backbone; parameters live in the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    spec: BackboneSpec,
    body: Body,
}

impl Encoder {
    /// Registers backbone parameters under `s` (conventionally the `encoder` scope).
    pub fn build<T: Scalar>(s: &mut Scope<'_, T>, spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let body = match spec.profile {
            Profile::Full => Body::Full(ResNeXt::new(s)),
            Profile::Tiny => {
                let mut in_ch = 3;
                let stages = spec
                    .level_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let stage = ConvBnRelu::new(&mut s.sub(&format!("stage{}", i + 1)), in_ch, c, 3, Conv2dOpts::same(3).with_stride(2));
                        in_ch = c;
                        stage
                    })
                    .collect();
                Body::Tiny(stages)
            }
        };
        Ok(Self { spec: spec.clone(), body })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Runs the backbone on a normalized `[N, 3, H, W]` batch.
    pub fn extract_features<T: Scalar>(&self, ctx: &Ctx<'_, T>, image: &Var<T>, source_scale: f64) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = image.dims4();
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 input channels, got {c}")));
        }
        if h < 32 || w < 32 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidInput(format!("input {h}x{w} must be even and at least 32 in each dimension")));
        }
        if !image.value().all_finite() {
            return Err(Error::InvalidInput("input contains non-finite values".into()));
        }
        let levels = match &self.body {
            Body::Full(net) => net.forward(ctx, image),
            Body::Tiny(stages) => {
                let mut y = image.clone();
                stages
                    .iter()
                    .map(|stage| {
                        y = stage.forward(ctx, &y);
                        y.clone()
                    })
                    .collect()
            }
        };
        let meta = self
            .spec
            .level_channels
            .iter()
            .zip(&self.spec.level_strides)
            .map(|(&channels, &stride)| LevelMeta { channels, stride, source_scale })
            .collect();
        Ok(FeaturePyramid { levels, meta })
    }
}

/// Builds a standalone backbone with its own parameter store.
pub fn build_encoder<T: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<(Encoder, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let encoder = Encoder::build(&mut store.root(seed).sub(ENCODER_PREFIX), spec)?;
    Ok((encoder, store))
}

/// Names of tensors read from or passed over by [`load_pretrained`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadManifest {
    pub loaded: Vec<String>,
    /// File entries that are not backbone tensors.
    pub skipped: Vec<String>,
}

/// Overwrites every backbone parameter and buffer in `store` from a checkpoint
/// container. Every backbone tensor must be present with its exact shape.
pub fn load_pretrained<T: Scalar>(encoder: &Encoder, store: &mut ParamStore<T>, weights: &Path) -> Result<LoadManifest> {
    if encoder.spec.profile == Profile::Tiny {
        return Err(Error::PretrainedUnsupported);
    }
    let file = checkpoint::read_container::<T>(weights)?;
    let prefix = format!("{ENCODER_PREFIX}.");
    let wanted: Vec<String> = store
        .param_names()
        .chain(store.buffer_names())
        .filter(|n| n.starts_with(&prefix))
        .map(str::to_string)
        .collect();
    let mut manifest = LoadManifest::default();
    let mut by_name: std::collections::HashMap<String, crate::Tensor<T>> = std::collections::HashMap::new();
    for (name, tensor) in file.tensors {
        if name.starts_with(&prefix) {
            by_name.insert(name, tensor);
        } else {
            manifest.skipped.push(name);
        }
    }
    for name in &wanted {
        let tensor = by_name.remove(name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "missing from weights file".into(),
        })?;
        store.set(name, tensor)?;
        manifest.loaded.push(name.clone());
    }
    manifest.skipped.extend(by_name.into_keys());
    manifest.skipped.sort();
    Ok(manifest)
}
