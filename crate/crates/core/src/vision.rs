//! Grayscale image encoder producing a three-level feature pyramid (strides 8, 16, 32).
//!
//! Two backbones share the pyramid contract:
//! - [`TinyBackbone`]: a small residual network with group norm, trained from scratch.
//! - [`ClipResNet`]: CLIP's modified ResNet (3-conv stem, anti-aliased bottlenecks). Parameter
//!   names mirror CLIP's `visual.*` layout; the attention-pool head is not built.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, VarBuilder};

use crate::error::{shape_err, Result};

/// Stage outputs `F_2, F_3, F_4`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim(1).unwrap_or(0)).collect()
    }
}

pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Spatial size of a level for input side `n` and stride `s`.
pub fn level_size(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

/// Collapses a 3-channel stem kernel `(O, 3, k, k)` to `(O, 1, k, k)` by summing over inputs.
///
/// A gray image replicated to three channels through the original kernel gives exactly the
/// response of the single-channel image through the summed kernel.
pub fn adapt_input_channels(weight: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = weight.dims4()?;
    if c != 3 {
        return Err(shape_err!("stem kernel must have 3 input channels, got {c}"));
    }
    Ok(weight.sum_keepdim(1)?)
}

fn conv(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    bias: bool,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(if bias {
        candle_nn::conv2d(c_in, c_out, k, cfg, vb)?
    } else {
        candle_nn::conv2d_no_bias(c_in, c_out, k, cfg, vb)?
    })
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

fn group_norm(c: usize, vb: VarBuilder) -> Result<GroupNorm> {
    Ok(candle_nn::group_norm(groups_for(c), c, 1e-5, vb)?)
}

struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                conv(c_in, c_out, 1, stride, false, vb.pp("shortcut.conv"))?,
                group_norm(c_out, vb.pp("shortcut.norm"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(c_in, c_out, 3, stride, false, vb.pp("conv1"))?,
            norm1: group_norm(c_out, vb.pp("norm1"))?,
            conv2: conv(c_out, c_out, 3, 1, false, vb.pp("conv2"))?,
            norm2: group_norm(c_out, vb.pp("norm2"))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let s = match &self.shortcut {
            Some((c, n)) => n.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

/// Stride-4 stem followed by three stride-2 residual stages.
pub struct TinyBackbone {
    stem: Vec<(Conv2d, GroupNorm)>,
    stages: Vec<Vec<BasicBlock>>,
}

impl TinyBackbone {
    pub fn new(stem: usize, stages: &[usize], blocks: &[usize], vb: VarBuilder) -> Result<Self> {
        if stages.len() != 3 {
            return Err(shape_err!("tiny backbone needs 3 stage widths"));
        }
        let stem_layers = vec![
            (
                conv(1, stem, 3, 2, false, vb.pp("stem.conv1"))?,
                group_norm(stem, vb.pp("stem.norm1"))?,
            ),
            (
                conv(stem, stem, 3, 2, false, vb.pp("stem.conv2"))?,
                group_norm(stem, vb.pp("stem.norm2"))?,
            ),
        ];
        let mut c_in = stem;
        let mut all = Vec::new();
        for (i, &c_out) in stages.iter().enumerate() {
            let n = blocks.get(i).copied().unwrap_or(1).max(1);
            let vb_s = vb.pp("stages").pp(i);
            let mut stage = vec![BasicBlock::new(c_in, c_out, 2, vb_s.pp(0))?];
            for j in 1..n {
                stage.push(BasicBlock::new(c_out, c_out, 1, vb_s.pp(j))?);
            }
            all.push(stage);
            c_in = c_out;
        }
        Ok(Self {
            stem: stem_layers,
            stages: all,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        for (c, n) in &self.stem {
            x = n.forward(&c.forward(&x)?)?.relu()?;
        }
        let mut out = Vec::with_capacity(3);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Batch norm with fixed statistics; affine parameters stay trainable.
struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        use candle_nn::Init::Const;
        Ok(Self {
            weight: vb.get_with_hints(c, "weight", Const(1.0))?,
            bias: vb.get_with_hints(c, "bias", Const(0.0))?,
            running_mean: vb.get_with_hints(c, "running_mean", Const(0.0))?,
            running_var: vb.get_with_hints(c, "running_var", Const(1.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let shape = (1, c, 1, 1);
        let mean = self.running_mean.detach().reshape(shape)?;
        let inv = (self.running_var.detach() + 1e-5)?.sqrt()?.recip()?.reshape(shape)?;
        let scale = self.weight.reshape(shape)?.broadcast_mul(&inv)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    stride: usize,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

const EXPANSION: usize = 4;

impl Bottleneck {
    fn new(inplanes: usize, planes: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let downsample = if stride > 1 || inplanes != planes * EXPANSION {
            Some((
                conv(inplanes, planes * EXPANSION, 1, 1, false, vb.pp("downsample.0"))?,
                FrozenBatchNorm::new(planes * EXPANSION, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(inplanes, planes, 1, 1, false, vb.pp("conv1"))?,
            bn1: FrozenBatchNorm::new(planes, vb.pp("bn1"))?,
            conv2: conv(planes, planes, 3, 1, false, vb.pp("conv2"))?,
            bn2: FrozenBatchNorm::new(planes, vb.pp("bn2"))?,
            conv3: conv(planes, planes * EXPANSION, 1, 1, false, vb.pp("conv3"))?,
            bn3: FrozenBatchNorm::new(planes * EXPANSION, vb.pp("bn3"))?,
            stride,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let mut y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        if self.stride > 1 {
            y = y.avg_pool2d(self.stride)?;
        }
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let identity = match &self.downsample {
            Some((c, bn)) => {
                let x = if self.stride > 1 {
                    x.avg_pool2d(self.stride)?
                } else {
                    x.clone()
                };
                bn.forward(&c.forward(&x)?)?
            }
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// CLIP's modified ResNet trunk (`visual.*` without `attnpool`), single-channel input.
pub struct ClipResNet {
    stem: Vec<(Conv2d, FrozenBatchNorm)>,
    layers: Vec<Vec<Bottleneck>>,
}

impl ClipResNet {
    /// `width` is the trunk width (64 for RN101), `blocks` the four layer depths.
    pub fn new(width: usize, blocks: &[usize], vb: VarBuilder) -> Result<Self> {
        if blocks.len() != 4 {
            return Err(shape_err!("CLIP ResNet needs four layer depths"));
        }
        let half = width / 2;
        let stem = vec![
            (conv(1, half, 3, 2, false, vb.pp("conv1"))?, FrozenBatchNorm::new(half, vb.pp("bn1"))?),
            (conv(half, half, 3, 1, false, vb.pp("conv2"))?, FrozenBatchNorm::new(half, vb.pp("bn2"))?),
            (conv(half, width, 3, 1, false, vb.pp("conv3"))?, FrozenBatchNorm::new(width, vb.pp("bn3"))?),
        ];
        let mut inplanes = width;
        let mut layers = Vec::new();
        for (i, &n) in blocks.iter().enumerate() {
            let planes = width << i;
            let stride = if i == 0 { 1 } else { 2 };
            let vb_l = vb.pp(format!("layer{}", i + 1));
            let mut layer = vec![Bottleneck::new(inplanes, planes, stride, vb_l.pp(0))?];
            inplanes = planes * EXPANSION;
            for j in 1..n {
                layer.push(Bottleneck::new(inplanes, planes, 1, vb_l.pp(j))?);
            }
            layers.push(layer);
        }
        Ok(Self { stem, layers })
    }

    pub fn stage_channels(width: usize) -> [usize; 3] {
        [width * 2 * EXPANSION, width * 4 * EXPANSION, width * 8 * EXPANSION]
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        for (c, bn) in &self.stem {
            x = bn.forward(&c.forward(&x)?)?.relu()?;
        }
        x = x.avg_pool2d(2)?;
        let mut out = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            for block in layer {
                x = block.forward(&x)?;
            }
            if i >= 1 {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}

pub enum Backbone {
    Tiny(TinyBackbone),
    Clip(ClipResNet),
}

pub struct VisionEncoder {
    backbone: Backbone,
    height: usize,
    width: usize,
}

impl VisionEncoder {
    pub fn new(backbone: Backbone, height: usize, width: usize) -> Self {
        Self {
            backbone,
            height,
            width,
        }
    }

    /// `(B, 1, H, W)` normalized images → pyramid with strides 8/16/32.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 || h != self.height || w != self.width {
            return Err(shape_err!(
                "expected images of shape (B, 1, {}, {}), got (B, {c}, {h}, {w})",
                self.height,
                self.width
            ));
        }
        let levels = match &self.backbone {
            Backbone::Tiny(b) => b.forward(images)?,
            Backbone::Clip(b) => b.forward(images)?,
        };
        Ok(FeaturePyramid {
            levels,
            strides: PYRAMID_STRIDES.to_vec(),
        })
    }
}
