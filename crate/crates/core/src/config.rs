//! Run configuration.
//!
//! The on-disk form is a flat TOML table. Loading starts from the preset of the file's `scale`
//! and overlays every key present in the file, so a resolved config is always fully materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Desk-scale from-scratch model.
    Tiny,
    /// CLIP RN101-compatible model.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Lowercase word-level vocabulary built from the dataset.
    Word,
    /// CLIP byte-pair encoding; needs `vocab_path` pointing at the merge table.
    Bpe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Half-cosine decay from `lr` to zero at `max_epochs`.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,

    pub dataset_root: String,
    pub out_dir: String,
    pub image_size: usize,
    pub image_mean: f64,
    pub image_std: f64,
    pub augment_flip: bool,
    pub column_image: String,
    pub column_text: String,
    pub column_split: String,
    pub mask_prefix: String,

    pub tokenizer: TokenizerKind,
    pub vocab_path: String,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_dim: usize,

    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub pretrained_path: String,
    pub freeze_encoders: bool,

    pub causal_intervention: bool,
    pub masker_channels: usize,
    pub fusion_channels: usize,
    pub carafe_kernel: usize,
    pub carafe_encoder_kernel: usize,
    pub carafe_compressed_channels: usize,
    pub carafe_chain: bool,

    pub decoder_channels: usize,
    pub kernel_size: usize,

    pub lambda: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub miou_two_class: bool,
}

/// Mean and std of CLIP's image normalization, averaged over the RGB channels.
pub const CLIP_GRAY_MEAN: f64 = (0.48145466 + 0.4578275 + 0.40821073) / 3.0;
pub const CLIP_GRAY_STD: f64 = (0.26862954 + 0.26130258 + 0.27577711) / 3.0;

/// Vocabulary budget of the CLIP byte-pair encoder.
pub const CLIP_BPE_VOCAB_SIZE: usize = 49152;

impl Default for RunConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl RunConfig {
    fn common(scale: Scale) -> Self {
        Self {
            scale,
            seed: 0,
            dataset_root: "data".into(),
            out_dir: "runs/default".into(),
            image_size: 224,
            image_mean: CLIP_GRAY_MEAN,
            image_std: CLIP_GRAY_STD,
            augment_flip: false,
            column_image: "image_name".into(),
            column_text: "description".into(),
            column_split: "split".into(),
            mask_prefix: String::new(),
            tokenizer: TokenizerKind::Word,
            vocab_path: String::new(),
            max_text_len: 20,
            vocab_size: 0,
            text_width: 0,
            text_layers: 0,
            text_heads: 0,
            text_dim: 0,
            stem_channels: 0,
            stage_channels: vec![],
            stage_blocks: vec![],
            pretrained_path: String::new(),
            freeze_encoders: false,
            causal_intervention: true,
            masker_channels: 0,
            fusion_channels: 0,
            carafe_kernel: 5,
            carafe_encoder_kernel: 3,
            carafe_compressed_channels: 64,
            carafe_chain: true,
            decoder_channels: 0,
            kernel_size: 3,
            lambda: 0.05,
            lr: 3e-5,
            lr_schedule: LrSchedule::Cosine,
            max_epochs: 2000,
            patience: 100,
            batch_size: 0,
            miou_two_class: true,
        }
    }

    /// CLIP RN101-compatible preset.
    pub fn full() -> Self {
        Self {
            tokenizer: TokenizerKind::Bpe,
            vocab_size: CLIP_BPE_VOCAB_SIZE + 256,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            text_dim: 512,
            stem_channels: 64,
            stage_channels: vec![512, 1024, 2048],
            stage_blocks: vec![3, 4, 23, 3],
            masker_channels: 256,
            fusion_channels: 256,
            decoder_channels: 512,
            batch_size: 32,
            ..Self::common(Scale::Full)
        }
    }

    /// Desk-scale preset: 2-layer 128-wide text encoder, 3-stage 32/64/128 backbone.
    pub fn tiny() -> Self {
        Self {
            tokenizer: TokenizerKind::Word,
            vocab_size: 0,
            text_width: 128,
            text_layers: 2,
            text_heads: 2,
            text_dim: 128,
            stem_channels: 16,
            stage_channels: vec![32, 64, 128],
            stage_blocks: vec![1, 1, 1],
            masker_channels: 32,
            fusion_channels: 64,
            decoder_channels: 64,
            batch_size: 4,
            ..Self::common(Scale::Tiny)
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Tiny => Self::tiny(),
            Scale::Full => Self::full(),
        }
    }

    /// Resolves a partial flat table: preset of its `scale` (default full) overlaid with its keys.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let scale = match table.get("scale") {
            Some(v) => v
                .clone()
                .try_into::<Scale>()
                .map_err(|e| Error::Config(format!("scale: {e}")))?,
            None => Scale::Full,
        };
        Self::preset(scale).overlay(table)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(s).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Applies `key = value` overrides on top of `self`. Unknown keys are rejected.
    pub fn overlay(&self, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            base.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a `key=value` override, reading the value as TOML and falling back to a string.
    pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
        let k = k.trim().to_string();
        let v = v.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        Ok((k, value))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(format!("image_size must be a positive multiple of 32, got {}", self.image_size));
        }
        if self.max_text_len < 2 {
            return fail("max_text_len must be at least 2".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.carafe_kernel % 2 == 0 || self.carafe_encoder_kernel % 2 == 0 {
            return fail("carafe kernel sizes must be odd".into());
        }
        if self.stage_channels.len() != 3 {
            return fail("stage_channels needs exactly three entries".into());
        }
        if self.lambda < 0.0 {
            return fail("lambda must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return fail("text_width must be divisible by text_heads".into());
        }
        if self.image_std <= 0.0 {
            return fail("image_std must be positive".into());
        }
        if self.scale == Scale::Full && self.stage_blocks.len() != 4 {
            return fail("full scale needs four stage_blocks entries".into());
        }
        Ok(())
    }

    /// Hash over every field that determines parameter shapes or the forward computation.
    pub fn architecture_hash(&self) -> String {
        let arch = serde_json::json!({
            "scale": self.scale,
            "image_size": self.image_size,
            "tokenizer": self.tokenizer,
            "max_text_len": self.max_text_len,
            "vocab_size": self.vocab_size,
            "text_width": self.text_width,
            "text_layers": self.text_layers,
            "text_heads": self.text_heads,
            "text_dim": self.text_dim,
            "stem_channels": self.stem_channels,
            "stage_channels": self.stage_channels,
            "stage_blocks": self.stage_blocks,
            "causal_intervention": self.causal_intervention,
            "masker_channels": self.masker_channels,
            "fusion_channels": self.fusion_channels,
            "carafe_kernel": self.carafe_kernel,
            "carafe_encoder_kernel": self.carafe_encoder_kernel,
            "carafe_compressed_channels": self.carafe_compressed_channels,
            "carafe_chain": self.carafe_chain,
            "decoder_channels": self.decoder_channels,
            "kernel_size": self.kernel_size,
        });
        let digest = Sha256::digest(arch.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
