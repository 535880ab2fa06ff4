//! Full referring-segmentation network: encoders, causal intervention, fusion, twin decoders.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::{RunConfig, Scale};
use crate::decoder::Decoder;
use crate::error::{shape_err, Error, Result};
use crate::intervention::{intervene, Fusion, FusionConfig, MaskPair, Masker};
use crate::params::ParamStore;
use crate::text::{TextEncoder, TextEncoderConfig, TokenBatch};
use crate::vision::{adapt_input_channels, Backbone, ClipResNet, TinyBackbone, VisionEncoder};
use crate::carafe::CarafeConfig;

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `D_c` response map `(B, 1, H, W)`; the only prediction used at inference.
    pub causal_logits: Tensor,
    /// `D_s` response map, absent when the intervention module is disabled.
    pub confounding_logits: Option<Tensor>,
    /// Per-level masks, finest level first; empty when the intervention module is disabled.
    pub masks: Vec<MaskPair>,
}

pub struct SegModel {
    config: RunConfig,
    params: ParamStore,
    device: Device,
    dtype: DType,
    text: TextEncoder,
    vision: VisionEncoder,
    maskers: Vec<Masker>,
    fuse_causal: Fusion,
    fuse_confounding: Option<Fusion>,
    decoder_causal: Decoder,
    decoder_confounding: Option<Decoder>,
}

impl SegModel {
    pub fn new(config: &RunConfig, device: &Device) -> Result<Self> {
        Self::with_dtype(config, DType::F32, device)
    }

    /// Builds a freshly initialized model; parameters are drawn from `config.seed`.
    pub fn with_dtype(config: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        if config.vocab_size == 0 {
            return Err(Error::Config(
                "vocab_size is unresolved; build the tokenizer before the model".into(),
            ));
        }
        let params = ParamStore::new(config.seed);
        let vb = params.var_builder(dtype, device);

        let text = TextEncoder::new(
            TextEncoderConfig {
                vocab_size: config.vocab_size,
                context_len: config.max_text_len,
                width: config.text_width,
                layers: config.text_layers,
                heads: config.text_heads,
                embed_dim: config.text_dim,
            },
            vb.pp("text"),
        )?;

        let backbone = match config.scale {
            Scale::Tiny => Backbone::Tiny(TinyBackbone::new(
                config.stem_channels,
                &config.stage_channels,
                &config.stage_blocks,
                vb.pp("vision"),
            )?),
            Scale::Full => {
                let expect = ClipResNet::stage_channels(config.stem_channels);
                if config.stage_channels != expect {
                    return Err(Error::Config(format!(
                        "stage_channels {:?} inconsistent with trunk width {} (expected {:?})",
                        config.stage_channels, config.stem_channels, expect
                    )));
                }
                Backbone::Clip(ClipResNet::new(
                    config.stem_channels,
                    &config.stage_blocks,
                    vb.pp("vision"),
                )?)
            }
        };
        let vision = VisionEncoder::new(backbone, config.image_size, config.image_size);

        let fusion_cfg = FusionConfig {
            level_channels: config.stage_channels.clone(),
            level_factors: vec![1, 2, 4],
            proj_channels: config.fusion_channels,
            out_channels: config.decoder_channels,
            carafe: CarafeConfig {
                k_up: config.carafe_kernel,
                k_enc: config.carafe_encoder_kernel,
                sigma: 2,
                compressed_channels: config.carafe_compressed_channels,
            },
            chain: config.carafe_chain,
        };

        let (maskers, fuse_confounding, decoder_confounding) = if config.causal_intervention {
            let maskers = config
                .stage_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Masker::new(c, config.masker_channels, vb.pp("masker").pp(i)))
                .collect::<Result<Vec<_>>>()?;
            (
                maskers,
                Some(Fusion::new(&fusion_cfg, vb.pp("fuse_s"))?),
                Some(Decoder::new(
                    config.text_dim,
                    config.decoder_channels,
                    config.kernel_size,
                    vb.pp("decoder_s"),
                )?),
            )
        } else {
            (Vec::new(), None, None)
        };
        let fuse_causal = Fusion::new(&fusion_cfg, vb.pp("fuse_c"))?;
        let decoder_causal = Decoder::new(
            config.text_dim,
            config.decoder_channels,
            config.kernel_size,
            vb.pp("decoder_c"),
        )?;

        Ok(Self {
            config: config.clone(),
            params,
            device: device.clone(),
            dtype,
            text,
            vision,
            maskers,
            fuse_causal,
            fuse_confounding,
            decoder_causal,
            decoder_confounding,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn has_intervention(&self) -> bool {
        !self.maskers.is_empty()
    }

    /// Parameters updated by the optimizer: everything except frozen statistics, and the
    /// encoders when `freeze_encoders` is set.
    pub fn trainable_params(&self) -> Vec<(String, candle_core::Var)> {
        self.params
            .vars()
            .into_iter()
            .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .filter(|(name, _)| {
                !(self.config.freeze_encoders
                    && (name.starts_with("text.") || name.starts_with("vision.")))
            })
            .collect()
    }

    pub fn encode_text(&self, tokens: &TokenBatch) -> Result<Tensor> {
        self.text.forward(tokens)
    }

    pub fn forward(&self, images: &Tensor, tokens: &TokenBatch) -> Result<ModelOutput> {
        let images = images.to_dtype(self.dtype)?;
        let (b, _, h, w) = images.dims4()?;
        if tokens.eos_positions.len() != b {
            return Err(shape_err!("{b} images but {} expressions", tokens.eos_positions.len()));
        }
        let tau = self.text.forward(tokens)?;
        let pyramid = self.vision.forward(&images)?;

        if let (Some(fuse_s), Some(dec_s)) = (&self.fuse_confounding, &self.decoder_confounding) {
            let split = intervene(&pyramid.levels, &self.maskers)?;
            let fused_c = self.fuse_causal.forward(&split.causal)?;
            let fused_s = fuse_s.forward(&split.confounding)?;
            Ok(ModelOutput {
                causal_logits: self.decoder_causal.forward(&tau, &fused_c, h, w)?,
                confounding_logits: Some(dec_s.forward(&tau, &fused_s, h, w)?),
                masks: split.masks,
            })
        } else {
            let fused = self.fuse_causal.forward(&pyramid.levels)?;
            Ok(ModelOutput {
                causal_logits: self.decoder_causal.forward(&tau, &fused, h, w)?,
                confounding_logits: None,
                masks: Vec::new(),
            })
        }
    }

    /// Loads CLIP weights from a safetensors export of the original checkpoint.
    ///
    /// See [`clip_key_to_param`] for the key mapping. The stem's first convolution is collapsed
    /// to one input channel and the positional table is cut to `max_text_len` rows.
    pub fn load_clip_weights(&self, path: &Path) -> Result<ClipLoadReport> {
        let tensors = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut report = ClipLoadReport::default();
        for (key, value) in tensors {
            let Some(name) = clip_key_to_param(&key) else {
                report.skipped.push(key);
                continue;
            };
            let Some(var) = self.params.get(&name) else {
                report.skipped.push(key);
                continue;
            };
            let mut value = value;
            if name == "vision.conv1.weight" && value.dim(1)? == 3 {
                value = adapt_input_channels(&value)?;
            }
            if name == "text.positional_embedding" && value.dim(0)? > var.dim(0)? {
                value = value.narrow(0, 0, var.dim(0)?)?;
            }
            self.params.assign(&name, &value)?;
            report.loaded.push(name);
        }
        report.loaded.sort();
        report.missing = self
            .params
            .vars()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| (n.starts_with("text.") || n.starts_with("vision.")) && !report.loaded.contains(n))
            .collect();
        Ok(report)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ClipLoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
    /// Encoder parameters the checkpoint did not provide.
    pub missing: Vec<String>,
}

/// Maps a CLIP state-dict key to this model's parameter name.
///
/// `visual.X` → `vision.X` (except `visual.attnpool.*`, which is discarded); the text tower keys
/// `token_embedding.*`, `positional_embedding`, `transformer.*`, `ln_final.*` and
/// `text_projection` gain a `text.` prefix. Everything else (`logit_scale`, metadata) is dropped.
pub fn clip_key_to_param(key: &str) -> Option<String> {
    if let Some(rest) = key.strip_prefix("visual.") {
        if rest.starts_with("attnpool.") {
            return None;
        }
        return Some(format!("vision.{rest}"));
    }
    let text_roots = ["token_embedding.", "transformer.", "ln_final."];
    if text_roots.iter().any(|r| key.starts_with(r))
        || key == "positional_embedding"
        || key == "text_projection"
    {
        return Some(format!("text.{key}"));
    }
    None
}
