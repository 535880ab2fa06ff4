//! Causal-intervention masking and multi-scale fusion.
//!
//! Each pyramid level gets one masker (coordinate conv → ReLU → conv → sigmoid) producing a
//! mask `M`; the complement `1 − M` routes the remaining signal into the confounding stream.
//! Each stream is then brought to the stride-8 grid with CARAFE, projected to a shared width,
//! concatenated and reduced with a 1×1 convolution.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use crate::carafe::{Carafe, CarafeConfig};
use crate::error::{shape_err, Result};
use crate::ops;

/// Complementary soft masks, each `(B, 1, h, w)`.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub mask: Tensor,
    pub complement: Tensor,
}

impl MaskPair {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mask = ops::sigmoid(logits)?;
        let complement = mask.affine(-1.0, 1.0)?;
        Ok(Self { mask, complement })
    }
}

/// `(M ⊙ F, (1 − M) ⊙ F)` with the mask broadcast over channels.
///
/// The confounding part is formed as `F − M⊙F` and the causal part re-derived as
/// `F − F^s`; both subtractions are exact (Sterbenz), so `F^c + F^s == F` bit for bit.
pub fn split(features: &Tensor, masks: &MaskPair) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = features.dims4()?;
    let (mb, mc, mh, mw) = masks.mask.dims4()?;
    if mb != b || mc != 1 || mh != h || mw != w {
        return Err(shape_err!(
            "mask {:?} does not match features {:?}",
            masks.mask.dims(),
            features.dims()
        ));
    }
    let masked = features.broadcast_mul(&masks.mask)?;
    let confounding = (features - masked)?;
    let causal = (features - &confounding)?;
    Ok((causal, confounding))
}

pub struct Masker {
    coord_conv: Conv2d,
    conv: Conv2d,
}

impl Masker {
    pub fn new(channels: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            coord_conv: candle_nn::conv2d(channels + 2, hidden, 3, cfg, vb.pp("coord_conv"))?,
            conv: candle_nn::conv2d(hidden, 1, 3, cfg, vb.pp("conv"))?,
        })
    }

    /// Pre-sigmoid mask logits `(B, 1, h, w)`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = features.dims4()?;
        let coords = ops::coord_channels(b, h, w, features.dtype(), features.device())?;
        let x = Tensor::cat(&[features, &coords], 1)?;
        let x = self.coord_conv.forward(&x)?.relu()?;
        Ok(self.conv.forward(&x)?)
    }

    pub fn make_masks(&self, features: &Tensor) -> Result<MaskPair> {
        MaskPair::from_logits(&self.logits(features)?)
    }
}

/// Causal and confounding streams of one pyramid.
#[derive(Debug, Clone)]
pub struct SplitFeatures {
    pub causal: Vec<Tensor>,
    pub confounding: Vec<Tensor>,
    pub masks: Vec<MaskPair>,
}

/// Applies one masker per level.
pub fn intervene(levels: &[Tensor], maskers: &[Masker]) -> Result<SplitFeatures> {
    if levels.len() != maskers.len() {
        return Err(shape_err!("{} levels but {} maskers", levels.len(), maskers.len()));
    }
    let mut out = SplitFeatures {
        causal: Vec::with_capacity(levels.len()),
        confounding: Vec::with_capacity(levels.len()),
        masks: Vec::with_capacity(levels.len()),
    };
    for (f, m) in levels.iter().zip(maskers) {
        let masks = m.make_masks(f)?;
        let (c, s) = split(f, &masks)?;
        out.causal.push(c);
        out.confounding.push(s);
        out.masks.push(masks);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Channels of each input level, finest first.
    pub level_channels: Vec<usize>,
    /// Upscale factor of each level relative to the finest one (1, 2, 4, ...).
    pub level_factors: Vec<usize>,
    pub proj_channels: usize,
    pub out_channels: usize,
    pub carafe: CarafeConfig,
    /// Reach factors above 2 through repeated ×2 steps instead of one large step.
    pub chain: bool,
}

struct FusionLevel {
    upsamplers: Vec<Carafe>,
    proj: Conv2d,
}

/// Brings one stream's levels to a common grid and width.
pub struct Fusion {
    levels: Vec<FusionLevel>,
    out: Conv2d,
}

impl Fusion {
    pub fn new(cfg: &FusionConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.level_channels.len() != cfg.level_factors.len() || cfg.level_channels.is_empty() {
            return Err(shape_err!("fusion needs one factor per level"));
        }
        let mut levels = Vec::new();
        for (i, (&c, &factor)) in cfg.level_channels.iter().zip(&cfg.level_factors).enumerate() {
            let vb_l = vb.pp("levels").pp(i);
            let steps: Vec<usize> = if factor <= 1 {
                vec![]
            } else if cfg.chain {
                if !factor.is_power_of_two() {
                    return Err(shape_err!("chained upsampling needs a power-of-two factor, got {factor}"));
                }
                vec![2; factor.trailing_zeros() as usize]
            } else {
                vec![factor]
            };
            let upsamplers = steps
                .iter()
                .enumerate()
                .map(|(j, &sigma)| {
                    Carafe::new(c, CarafeConfig { sigma, ..cfg.carafe }, vb_l.pp("up").pp(j))
                })
                .collect::<Result<Vec<_>>>()?;
            let proj = candle_nn::conv2d(c, cfg.proj_channels, 1, Default::default(), vb_l.pp("proj"))?;
            levels.push(FusionLevel { upsamplers, proj });
        }
        let out = candle_nn::conv2d(
            cfg.proj_channels * levels.len(),
            cfg.out_channels,
            1,
            Default::default(),
            vb.pp("out"),
        )?;
        Ok(Self { levels, out })
    }

    pub fn forward(&self, stream: &[Tensor]) -> Result<Tensor> {
        if stream.len() != self.levels.len() {
            return Err(shape_err!(
                "fusion built for {} levels, got {}",
                self.levels.len(),
                stream.len()
            ));
        }
        let mut parts = Vec::with_capacity(stream.len());
        let mut grid: Option<(usize, usize)> = None;
        for (x, level) in stream.iter().zip(&self.levels) {
            let mut x = x.clone();
            for up in &level.upsamplers {
                x = up.forward(&x)?;
            }
            let (_, _, h, w) = x.dims4()?;
            match grid {
                None => grid = Some((h, w)),
                Some(g) if g != (h, w) => {
                    return Err(shape_err!("level reached {h}x{w}, expected {}x{}", g.0, g.1));
                }
                _ => {}
            }
            parts.push(level.proj.forward(&x)?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        Ok(self.out.forward(&cat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn zero_logits_give_half_masks() {
        let z = Tensor::zeros((1, 1, 3, 3), DType::F32, &dev()).unwrap();
        let m = MaskPair::from_logits(&z).unwrap();
        let a: Vec<f32> = m.mask.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.complement.flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().chain(b.iter()).all(|&v| v == 0.5));
    }

    #[test]
    fn hand_split() {
        let f = Tensor::new(&[[[[2.0f64]]]], &dev()).unwrap();
        let m = MaskPair {
            mask: Tensor::new(&[[[[0.25f64]]]], &dev()).unwrap(),
            complement: Tensor::new(&[[[[0.75f64]]]], &dev()).unwrap(),
        };
        let (c, s) = split(&f, &m).unwrap();
        assert_eq!(c.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.5]);
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.5]);
    }

    #[test]
    fn near_one_mask_keeps_everything_causal() {
        let f = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev()).unwrap();
        let logits = Tensor::full(40.0f64, (1, 1, 4, 4), &dev()).unwrap();
        let m = MaskPair::from_logits(&logits).unwrap();
        let (c, s) = split(&f, &m).unwrap();
        assert!(crate::ops::max_abs(&(c - &f).unwrap()).unwrap() < 1e-15);
        assert!(crate::ops::max_abs(&s).unwrap() < 1e-15);
    }

    #[test]
    fn split_shape_mismatch() {
        let f = Tensor::zeros((1, 3, 4, 4), DType::F32, &dev()).unwrap();
        let m = MaskPair::from_logits(&Tensor::zeros((1, 1, 2, 2), DType::F32, &dev()).unwrap()).unwrap();
        assert!(split(&f, &m).is_err());
    }

    #[test]
    fn masks_in_open_interval_and_input_specific() {
        let p = ParamStore::new(11);
        let masker = Masker::new(4, 8, p.var_builder(DType::F32, &dev())).unwrap();
        let a = Tensor::randn(0f32, 1.0, (1, 4, 6, 6), &dev()).unwrap();
        let b = Tensor::randn(0f32, 1.0, (1, 4, 6, 6), &dev()).unwrap();
        let ma = masker.make_masks(&a).unwrap();
        let mb = masker.make_masks(&b).unwrap();
        let v: Vec<f32> = ma.mask.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        let d = crate::ops::max_abs(&(ma.mask - mb.mask).unwrap()).unwrap();
        assert!(d > 0.0);
    }

    fn fusion_cfg(levels: Vec<usize>, factors: Vec<usize>) -> FusionConfig {
        FusionConfig {
            level_channels: levels,
            level_factors: factors,
            proj_channels: 6,
            out_channels: 5,
            carafe: CarafeConfig {
                k_up: 3,
                k_enc: 3,
                sigma: 2,
                compressed_channels: 4,
            },
            chain: true,
        }
    }

    #[test]
    fn fused_grid_is_finest_level() {
        let p = ParamStore::new(0);
        let fusion = Fusion::new(&fusion_cfg(vec![4, 6, 8], vec![1, 2, 4]), p.var_builder(DType::F32, &dev())).unwrap();
        let levels = vec![
            Tensor::randn(0f32, 1.0, (2, 4, 28, 28), &dev()).unwrap(),
            Tensor::randn(0f32, 1.0, (2, 6, 14, 14), &dev()).unwrap(),
            Tensor::randn(0f32, 1.0, (2, 8, 7, 7), &dev()).unwrap(),
        ];
        let out = fusion.forward(&levels).unwrap();
        assert_eq!(out.dims(), &[2, 5, 28, 28]);
        assert!(p.get("levels.2.up.1.encoder.weight").is_some());
        assert!(fusion.forward(&levels[..2]).is_err());
    }

    #[test]
    fn unchained_uses_single_step() {
        let p = ParamStore::new(0);
        let mut cfg = fusion_cfg(vec![4, 8], vec![1, 4]);
        cfg.chain = false;
        let fusion = Fusion::new(&cfg, p.var_builder(DType::F32, &dev())).unwrap();
        assert!(p.get("levels.1.up.0.encoder.weight").is_some());
        assert!(p.get("levels.1.up.1.encoder.weight").is_none());
        let levels = vec![
            Tensor::randn(0f32, 1.0, (1, 4, 8, 8), &dev()).unwrap(),
            Tensor::randn(0f32, 1.0, (1, 8, 2, 2), &dev()).unwrap(),
        ];
        assert_eq!(fusion.forward(&levels).unwrap().dims(), &[1, 5, 8, 8]);
    }

    #[test]
    fn zero_streams_zero_output_without_bias() {
        let p = ParamStore::new(0);
        let fusion = Fusion::new(&fusion_cfg(vec![4, 6], vec![1, 2]), p.var_builder(DType::F64, &dev())).unwrap();
        for (name, var) in p.vars() {
            if name.ends_with("proj.bias") || name == "out.bias" {
                p.assign(&name, &var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let levels = vec![
            Tensor::zeros((1, 4, 4, 4), DType::F64, &dev()).unwrap(),
            Tensor::zeros((1, 6, 2, 2), DType::F64, &dev()).unwrap(),
        ];
        let out = fusion.forward(&levels).unwrap();
        assert_eq!(crate::ops::max_abs(&out).unwrap(), 0.0);
    }

    #[test]
    fn single_level_is_a_pointwise_linear_map() {
        let p = ParamStore::new(0);
        let fusion = Fusion::new(&fusion_cfg(vec![3], vec![1]), p.var_builder(DType::F64, &dev())).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 5, 5), &dev()).unwrap();
        let y = fusion.forward(&[x.clone()]).unwrap();
        // compose the two 1x1 convolutions into one matrix and compare
        let wp = p.get("levels.0.proj.weight").unwrap().as_tensor().reshape((6, 3)).unwrap();
        let bp = p.get("levels.0.proj.bias").unwrap().as_tensor().clone();
        let wo = p.get("out.weight").unwrap().as_tensor().reshape((5, 6)).unwrap();
        let bo = p.get("out.bias").unwrap().as_tensor().clone();
        let w = wo.matmul(&wp).unwrap();
        let b = (wo.matmul(&bp.unsqueeze(1).unwrap()).unwrap().squeeze(1).unwrap() + bo).unwrap();
        let flat = x.reshape((3, 25)).unwrap();
        let expect = w.matmul(&flat).unwrap().broadcast_add(&b.unsqueeze(1).unwrap()).unwrap();
        let got = y.reshape((5, 25)).unwrap();
        assert!(crate::ops::max_abs(&(got - expect).unwrap()).unwrap() < 1e-12);
    }
}
