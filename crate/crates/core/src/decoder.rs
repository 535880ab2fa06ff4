//! Text-conditioned dynamic-kernel decoder.
//!
//! The text embedding is projected to `D = C·K·K + 1` values and split into a `C×K×K` kernel and
//! a scalar bias. Visual features are brought to full resolution (bilinear, then a learned 3×3
//! conv) and cross-correlated with the kernel, giving a one-channel response map.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use crate::error::{shape_err, Result};
use crate::ops;

/// Per-sample dynamic kernel: `weights` is `(B, C, K, K)`, `bias` is `(B,)`.
#[derive(Debug, Clone)]
pub struct ProjectedKernel {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ProjectedKernel {
    /// Splits a projected embedding `(B, C·K·K + 1)` positionally.
    pub fn split(projected: &Tensor, channels: usize, k: usize) -> Result<Self> {
        let (b, d) = projected.dims2()?;
        let expect = kernel_dim(channels, k);
        if d != expect {
            return Err(shape_err!("projection width {d} differs from D = {expect}"));
        }
        let n = channels * k * k;
        Ok(Self {
            weights: projected.narrow(1, 0, n)?.reshape((b, channels, k, k))?,
            bias: projected.narrow(1, n, 1)?.squeeze(1)?,
        })
    }
}

/// `D = C·K·K + 1`.
pub fn kernel_dim(channels: usize, k: usize) -> usize {
    channels * k * k + 1
}

/// `S = W ∗ F + b·1` with same padding and stride 1; one kernel per batch element.
///
/// `features` is `(B, C, H, W)`; the result is `(B, 1, H, W)`.
pub fn correlate(kernel: &ProjectedKernel, features: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = features.dims4()?;
    let (kb, kc, kh, kw) = kernel.weights.dims4()?;
    if kb != b || kc != c {
        return Err(shape_err!(
            "kernel {:?} does not match features {:?}",
            kernel.weights.dims(),
            features.dims()
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("kernel must be square with odd size, got {kh}x{kw}"));
    }
    let neigh = ops::neighborhoods(features, kh)?; // (B, C, K², H, W)
    let weights = kernel.weights.reshape((b, c, kh * kw, 1, 1))?;
    let response = neigh.broadcast_mul(&weights)?.sum((1, 2))?; // (B, H, W)
    let bias = kernel.bias.reshape((b, 1, 1))?;
    Ok(response.broadcast_add(&bias)?.unsqueeze(1)?)
}

pub struct Decoder {
    projection: Linear,
    up_conv: Conv2d,
    channels: usize,
    kernel_size: usize,
}

impl Decoder {
    pub fn new(text_dim: usize, channels: usize, kernel_size: usize, vb: VarBuilder) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(shape_err!("kernel size must be odd, got {kernel_size}"));
        }
        let projection = candle_nn::linear(text_dim, kernel_dim(channels, kernel_size), vb.pp("projection"))?;
        let up_conv = candle_nn::conv2d(
            channels,
            channels,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("up_conv"),
        )?;
        Ok(Self {
            projection,
            up_conv,
            channels,
            kernel_size,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn project_text(&self, tau: &Tensor) -> Result<ProjectedKernel> {
        let projected = self.projection.forward(tau)?;
        ProjectedKernel::split(&projected, self.channels, self.kernel_size)
    }

    pub fn upsample_features(&self, features: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let (_, c, h, w) = features.dims4()?;
        if c != self.channels {
            return Err(shape_err!("decoder expects {} channels, got {c}", self.channels));
        }
        if h > height || w > width {
            return Err(shape_err!("cannot upsample {h}x{w} to smaller {height}x{width}"));
        }
        let up = ops::resize_bilinear(features, height, width)?;
        Ok(self.up_conv.forward(&up)?)
    }

    /// Response map `(B, 1, H, W)` for text embeddings `(B, T)` and fused features `(B, C, h, w)`.
    pub fn forward(&self, tau: &Tensor, features: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let kernel = self.project_text(tau)?;
        let up = self.upsample_features(features, height, width)?;
        correlate(&kernel, &up)
    }
}
