//! Content-aware reassembly upsampling.
//!
//! A kernel-prediction branch (1×1 channel compressor, `k_enc×k_enc` content encoder, pixel
//! shuffle, per-location softmax) produces one normalized `k_up×k_up` kernel per output
//! location. Each output value is the kernel-weighted sum of the zero-padded neighborhood around
//! its source location, with weights shared across channels.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use crate::error::{shape_err, Result};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarafeConfig {
    pub k_up: usize,
    pub k_enc: usize,
    pub sigma: usize,
    pub compressed_channels: usize,
}

impl Default for CarafeConfig {
    fn default() -> Self {
        Self {
            k_up: 5,
            k_enc: 3,
            sigma: 2,
            compressed_channels: 64,
        }
    }
}

impl CarafeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_up == 0 || self.k_up % 2 == 0 {
            return Err(shape_err!("k_up must be odd, got {}", self.k_up));
        }
        if self.k_enc == 0 || self.k_enc % 2 == 0 {
            return Err(shape_err!("k_enc must be odd, got {}", self.k_enc));
        }
        if self.sigma == 0 {
            return Err(shape_err!("sigma must be at least 1"));
        }
        if self.compressed_channels == 0 {
            return Err(shape_err!("compressed_channels must be positive"));
        }
        Ok(())
    }
}

/// Per-output-location reassembly kernels, `(B, k_up², σh, σw)`, softmax-normalized over dim 1.
#[derive(Debug, Clone)]
pub struct ReassemblyKernels {
    pub weights: Tensor,
    pub k_up: usize,
    pub sigma: usize,
}

impl ReassemblyKernels {
    /// Turns raw encoder output `(B, σ²·k_up², h, w)` into normalized kernels.
    pub fn from_encoder_output(raw: &Tensor, k_up: usize, sigma: usize) -> Result<Self> {
        let c = raw.dim(1)?;
        if c != sigma * sigma * k_up * k_up {
            return Err(shape_err!(
                "encoder output has {c} channels, expected {}",
                sigma * sigma * k_up * k_up
            ));
        }
        let shuffled = ops::pixel_shuffle(raw, sigma)?;
        Ok(Self {
            weights: ops::softmax(&shuffled, 1)?,
            k_up,
            sigma,
        })
    }
}

/// Weighted neighborhood sums: `(B, C, h, w)` → `(B, C, σh, σw)`.
pub fn reassemble(features: &Tensor, kernels: &ReassemblyKernels) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let (kb, kk, kh, kw) = kernels.weights.dims4()?;
    let s = kernels.sigma;
    if kb != b || kk != kernels.k_up * kernels.k_up || kh != h * s || kw != w * s {
        return Err(shape_err!(
            "kernels {:?} do not match features {:?} at sigma {s}",
            kernels.weights.dims(),
            features.dims()
        ));
    }
    let neigh = ops::neighborhoods(features, kernels.k_up)?; // (B, C, k², h, w)
    let neigh = ops::repeat_nearest(&neigh, s)?; // (B, C, k², σh, σw)
    let weights = kernels.weights.unsqueeze(1)?; // (B, 1, k², σh, σw)
    let out = neigh.broadcast_mul(&weights)?.sum(2)?;
    debug_assert_eq!(out.dims(), &[b, c, h * s, w * s]);
    Ok(out)
}

pub struct Carafe {
    compressor: Conv2d,
    encoder: Conv2d,
    cfg: CarafeConfig,
}

impl Carafe {
    pub fn new(channels: usize, cfg: CarafeConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let compressor = candle_nn::conv2d(
            channels,
            cfg.compressed_channels,
            1,
            Default::default(),
            vb.pp("compressor"),
        )?;
        let encoder = candle_nn::conv2d(
            cfg.compressed_channels,
            cfg.sigma * cfg.sigma * cfg.k_up * cfg.k_up,
            cfg.k_enc,
            Conv2dConfig {
                padding: cfg.k_enc / 2,
                ..Default::default()
            },
            vb.pp("encoder"),
        )?;
        Ok(Self {
            compressor,
            encoder,
            cfg,
        })
    }

    pub fn config(&self) -> CarafeConfig {
        self.cfg
    }

    pub fn encoder_output(&self, features: &Tensor) -> Result<Tensor> {
        let compressed = self.compressor.forward(features)?;
        Ok(self.encoder.forward(&compressed)?)
    }

    pub fn predict_kernels(&self, features: &Tensor) -> Result<ReassemblyKernels> {
        let raw = self.encoder_output(features)?;
        ReassemblyKernels::from_encoder_output(&raw, self.cfg.k_up, self.cfg.sigma)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let kernels = self.predict_kernels(features)?;
        reassemble(features, &kernels)
    }
}
