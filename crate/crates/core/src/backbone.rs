//! Weight-shared convolutional feature extractor with output stride 8.
//!
//! Two variants share the same contract: a small residual network that
//! trains from scratch on synthetic data, and a ResNet-50 topology cut after
//! its fourth block (stride 1, dilation 2 there) meant for imported weights.
//! Both end in a 1x1 convolution to the model width.

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Result};
use crate::params::{path, Init, ParamGroup, ParamStore};
use crate::types::{FeatureGrid, TokenSequence};

pub const OUTPUT_STRIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Toy,
    Resnet50Style,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output channels per residual stage.
    pub stage_channels: Vec<usize>,
    pub output_dim: usize,
    pub dilation_in_last_stage: bool,
    /// Per-channel RGB standardization applied to `[0, 1]` pixels.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            stage_channels: vec![32, 64, 128],
            output_dim: 256,
            dilation_in_last_stage: false,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }
}

impl BackboneConfig {
    pub fn resnet50_style() -> Self {
        Self {
            variant: BackboneVariant::Resnet50Style,
            stage_channels: vec![256, 512, 1024],
            dilation_in_last_stage: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(config_err!("backbone output_dim must be positive"));
        }
        if self.pixel_std.iter().any(|&s| s <= 0.0) {
            return Err(config_err!("backbone pixel_std entries must be positive"));
        }
        match self.variant {
            BackboneVariant::Toy => {
                if self.stage_channels.len() < 3 || self.stage_channels.contains(&0) {
                    return Err(config_err!(
                        "toy backbone needs at least 3 non-empty stages for stride 8, got {:?}",
                        self.stage_channels
                    ));
                }
            }
            BackboneVariant::Resnet50Style => {
                if self.stage_channels != [256, 512, 1024] {
                    return Err(config_err!(
                        "resnet50_style backbone has fixed stage widths [256, 512, 1024]"
                    ));
                }
            }
        }
        Ok(())
    }

    /// `(stride, dilation)` for each toy residual stage.
    fn toy_stage_geometry(&self) -> Vec<(usize, usize)> {
        let n = self.stage_channels.len();
        (0..n)
            .map(|i| {
                if i < 3 {
                    (2, 1)
                } else if self.dilation_in_last_stage {
                    (1, 2)
                } else {
                    (1, 1)
                }
            })
            .collect()
    }

    /// Input pixel span `[stride*o + lo, stride*o + hi]` seen by output
    /// cell `o` of the toy variant (per axis).
    pub fn receptive_field(&self) -> (usize, isize, isize) {
        let (mut a, mut lo, mut hi) = (1isize, 0isize, 0isize);
        let mut conv = |k: isize, s: isize, pad: isize, dil: isize| {
            lo += -a * pad;
            hi += a * (-pad + dil * (k - 1));
            a *= s;
        };
        for (s, d) in self.toy_stage_geometry() {
            conv(3, s as isize, d as isize, d as isize);
            conv(3, 1, d as isize, d as isize);
        }
        (a as usize, lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchRole {
    Template,
    Search,
}

/// An RGB crop with values in `[0, 1]`, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub role: PatchRole,
}

impl ImagePatch {
    pub fn new(pixels: Vec<f32>, size: usize, role: PatchRole) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(contract!(
                "patch of side {size} needs {} values, got {}",
                size * size * 3,
                pixels.len()
            ));
        }
        Ok(Self { pixels, size, role })
    }

    pub fn uniform(size: usize, rgb: [f32; 3], role: PatchRole) -> Self {
        let pixels = (0..size * size).flat_map(|_| rgb).collect();
        Self { pixels, size, role }
    }
}

/// Stacks patches of one size into a `(batch, 3, H, W)` tensor.
pub fn patches_to_tensor(patches: &[&ImagePatch], dtype: DType, device: &Device) -> Result<Tensor> {
    let size = patches
        .first()
        .ok_or_else(|| contract!("empty patch batch"))?
        .size;
    if patches.iter().any(|p| p.size != size) {
        return Err(contract!("patches in a batch must share one size"));
    }
    let mut data = Vec::with_capacity(patches.len() * size * size * 3);
    for p in patches {
        data.extend_from_slice(&p.pixels);
    }
    let t = Tensor::from_vec(data, (patches.len(), size, size, 3), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

#[derive(Debug, Clone)]
struct Conv {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = store.create(
            path(prefix, "weight"),
            (c_out, c_in, k, k),
            Init::HeUniform(fan_in),
            ParamGroup::Backbone,
            rng,
        )?;
        let bias = if bias {
            Some(store.create(path(prefix, "bias"), c_out, Init::Zeros, ParamGroup::Backbone, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: dilation * (k / 2),
            dilation,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(
            self.weight.as_tensor(),
            self.padding,
            self.stride,
            self.dilation,
            1,
        )?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Frozen batch normalization folded into a per-channel affine map.
#[derive(Debug, Clone)]
struct Affine {
    scale: Var,
    shift: Var,
}

impl Affine {
    fn build(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            scale: store.create(path(prefix, "scale"), c, Init::Ones, ParamGroup::Backbone, rng)?,
            shift: store.create(path(prefix, "shift"), c, Init::Zeros, ParamGroup::Backbone, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.scale.dims()[0];
        Ok(x
            .broadcast_mul(&self.scale.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.shift.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Conv,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?;
        Ok((h + self.shortcut.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: (Conv, Affine),
    spatial: (Conv, Affine),
    expand: (Conv, Affine),
    downsample: Option<(Conv, Affine)>,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        width: usize,
        c_out: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut unit = |name: &str, ci: usize, co: usize, k: usize, s: usize, d: usize| -> Result<(Conv, Affine)> {
            Ok((
                Conv::build(store, &path(prefix, name), ci, co, k, s, d, false, rng)?,
                Affine::build(store, &path(prefix, &format!("{name}_bn")), co, rng)?,
            ))
        };
        let reduce = unit("conv1", c_in, width, 1, 1, 1)?;
        let spatial = unit("conv2", width, width, 3, stride, dilation)?;
        let expand = unit("conv3", width, c_out, 1, 1, 1)?;
        let downsample = if stride != 1 || c_in != c_out {
            Some(unit("downsample", c_in, c_out, 1, stride, 1)?)
        } else {
            None
        };
        Ok(Self {
            reduce,
            spatial,
            expand,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.reduce.1.forward(&self.reduce.0.forward(x)?)?.relu()?;
        let h = self.spatial.1.forward(&self.spatial.0.forward(&h)?)?.relu()?;
        let h = self.expand.1.forward(&self.expand.0.forward(&h)?)?;
        let skip = match &self.downsample {
            Some((c, a)) => a.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Toy(Vec<BasicBlock>),
    Resnet {
        stem: (Conv, Affine),
        stages: Vec<Vec<Bottleneck>>,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    body: Body,
    reduce: Conv,
}

impl Backbone {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (body, c_last) = match cfg.variant {
            BackboneVariant::Toy => {
                let mut blocks = Vec::new();
                let mut c_in = 3;
                for (i, (&c, (s, d))) in cfg
                    .stage_channels
                    .iter()
                    .zip(cfg.toy_stage_geometry())
                    .enumerate()
                {
                    let p = path(prefix, &format!("stage{}", i + 1));
                    blocks.push(BasicBlock {
                        conv1: Conv::build(store, &path(&p, "conv1"), c_in, c, 3, s, d, true, rng)?,
                        conv2: Conv::build(store, &path(&p, "conv2"), c, c, 3, 1, d, true, rng)?,
                        shortcut: Conv::build(store, &path(&p, "shortcut"), c_in, c, 1, s, 1, true, rng)?,
                    });
                    c_in = c;
                }
                (Body::Toy(blocks), c_in)
            }
            BackboneVariant::Resnet50Style => {
                let stem = (
                    Conv::build(store, &path(prefix, "stem"), 3, 64, 7, 2, 1, false, rng)?,
                    Affine::build(store, &path(prefix, "stem_bn"), 64, rng)?,
                );
                // blocks 2-4 of a 50-layer residual net; block 4 runs at
                // stride 1 with dilation 2 when requested
                let layout = [(3, 64, 256, 1, 1), (4, 128, 512, 2, 1), (6, 256, 1024, 2, 1)];
                let mut stages = Vec::new();
                let mut c_in = 64;
                for (si, &(n, width, c_out, stride, _)) in layout.iter().enumerate() {
                    let last = si == layout.len() - 1;
                    let (stride, dilation) = if last && cfg.dilation_in_last_stage {
                        (1, 2)
                    } else {
                        (stride, 1)
                    };
                    let mut blocks = Vec::new();
                    for b in 0..n {
                        let p = path(prefix, &format!("layer{}.{b}", si + 1));
                        let s = if b == 0 { stride } else { 1 };
                        blocks.push(Bottleneck::build(store, &p, c_in, width, c_out, s, dilation, rng)?);
                        c_in = c_out;
                    }
                    stages.push(blocks);
                }
                (Body::Resnet { stem, stages }, c_in)
            }
        };
        let reduce = Conv::build(
            store,
            &path(prefix, "reduce"),
            c_last,
            cfg.output_dim,
            1,
            1,
            1,
            true,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            body,
            reduce,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Total input-to-output stride implied by the configuration.
    pub fn stride(&self) -> usize {
        match self.cfg.variant {
            BackboneVariant::Toy => self.cfg.receptive_field().0,
            BackboneVariant::Resnet50Style => {
                if self.cfg.dilation_in_last_stage {
                    8
                } else {
                    16
                }
            }
        }
    }

    fn standardize(&self, pixels: &Tensor) -> Result<Tensor> {
        let dev = pixels.device();
        let dt = pixels.dtype();
        let mean = Tensor::new(&self.cfg.pixel_mean, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.cfg.pixel_std, dev)?.to_dtype(dt)?.reshape((1, 3, 1, 1))?;
        Ok(pixels.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Features of a `(batch, 3, H, W)` tensor of `[0, 1]` pixels.
    pub fn forward(&self, pixels: &Tensor) -> Result<FeatureGrid> {
        let (_, c, h, w) = pixels.dims4()?;
        if c != 3 {
            return Err(contract!("backbone expects RGB input, got {c} channels"));
        }
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(config_err!(
                "patch size {h}x{w} is not divisible by the output stride {OUTPUT_STRIDE}"
            ));
        }
        if self.stride() != OUTPUT_STRIDE {
            return Err(config_err!(
                "backbone stride is {}, expected {OUTPUT_STRIDE}",
                self.stride()
            ));
        }
        let mut x = self.standardize(pixels)?;
        match &self.body {
            Body::Toy(blocks) => {
                for b in blocks {
                    x = b.forward(&x)?;
                }
            }
            Body::Resnet { stem, stages } => {
                x = stem.1.forward(&stem.0.forward(&x)?)?.relu()?;
                // post-ReLU activations are non-negative, so zero padding
                // behaves like -inf padding for the max pool
                x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                x = x.max_pool2d_with_stride(3, 2)?;
                for stage in stages {
                    for b in stage {
                        x = b.forward(&x)?;
                    }
                }
            }
        }
        FeatureGrid::new(self.reduce.forward(&x)?)
    }
}

/// Extracts features of one patch.
pub fn extract_features(patch: &ImagePatch, backbone: &Backbone, dtype: DType, device: &Device) -> Result<FeatureGrid> {
    let t = patches_to_tensor(&[patch], dtype, device)?;
    backbone.forward(&t)
}

/// Row-major flatten of a feature grid into tokens.
pub fn flatten_features(f: &FeatureGrid) -> Result<TokenSequence> {
    f.flatten()
}
