//! Transformer text encoder producing one global embedding per expression.
//!
//! Parameter names follow CLIP's text tower (`token_embedding`, `positional_embedding`,
//! `transformer.resblocks.{i}.*`, `ln_final`, `text_projection`) so pretrained checkpoints map
//! by prefix only.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module, VarBuilder};

use crate::error::{shape_err, Error, Result};
use crate::ops;
use crate::text::tokenizer::TextQuery;

/// Layer normalization over the last dimension built from primitive ops, so it also runs in
/// `f64` and differentiates everywhere.
#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let centered = x.broadcast_sub(&x.mean_keepdim(last)?)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

/// A batch of token sequences ready for the encoder.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `(B, L)` u32 ids.
    pub ids: Tensor,
    /// EOS position per row.
    pub eos_positions: Vec<usize>,
}

impl TokenBatch {
    pub fn from_queries(queries: &[&TextQuery], eos_id: u32, device: &Device) -> Result<Self> {
        let n = queries.len();
        if n == 0 {
            return Err(shape_err!("empty token batch"));
        }
        let mut eos_positions = Vec::with_capacity(n);
        for q in queries {
            let pos = q.eos_position();
            if q.token_ids.get(pos) != Some(&eos_id) {
                return Err(Error::Tokenizer(format!(
                    "EOS id {eos_id} missing from token sequence for {:?}",
                    q.raw
                )));
            }
            eos_positions.push(pos);
        }
        // nothing after the last EOS can influence any EOS activation under causal attention
        let len = eos_positions.iter().max().unwrap() + 1;
        let mut flat = Vec::with_capacity(n * len);
        for q in queries {
            flat.extend_from_slice(&q.token_ids[..len]);
        }
        Ok(Self {
            ids: Tensor::from_vec(flat, (n, len), device)?,
            eos_positions,
        })
    }
}

struct ResidualBlock {
    ln_1: LayerNorm,
    in_proj: Linear,
    out_proj: Linear,
    ln_2: LayerNorm,
    c_fc: Linear,
    c_proj: Linear,
    heads: usize,
}

fn linear_named(
    in_dim: usize,
    out_dim: usize,
    weight: &str,
    bias: &str,
    vb: &VarBuilder,
) -> Result<Linear> {
    let init = candle_nn::init::DEFAULT_KAIMING_NORMAL;
    let w = vb.get_with_hints((out_dim, in_dim), weight, init)?;
    let b = vb.get_with_hints(out_dim, bias, candle_nn::Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

impl ResidualBlock {
    fn new(width: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let attn = vb.pp("attn");
        Ok(Self {
            ln_1: LayerNorm::new(width, 1e-5, vb.pp("ln_1"))?,
            in_proj: linear_named(width, 3 * width, "in_proj_weight", "in_proj_bias", &attn)?,
            out_proj: candle_nn::linear(width, width, attn.pp("out_proj"))?,
            ln_2: LayerNorm::new(width, 1e-5, vb.pp("ln_2"))?,
            c_fc: candle_nn::linear(width, 4 * width, vb.pp("mlp").pp("c_fc"))?,
            c_proj: candle_nn::linear(4 * width, width, vb.pp("mlp").pp("c_proj"))?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        let d = w / self.heads;
        let qkv = self.in_proj.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * w, w)?
                .reshape((b, l, self.heads, d))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        let scores = scores.broadcast_add(mask)?;
        let probs = ops::softmax(&scores, 3)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, w))?;
        Ok(self.out_proj.forward(&out)?)
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln_1.forward(x)?, mask)?)?;
        let h = ops::quick_gelu(&self.c_fc.forward(&self.ln_2.forward(&x)?)?)?;
        Ok((&x + self.c_proj.forward(&h)?)?)
    }
}

pub struct TextEncoder {
    token_embedding: candle_nn::Embedding,
    positional_embedding: Tensor,
    blocks: Vec<ResidualBlock>,
    ln_final: LayerNorm,
    text_projection: Tensor,
    cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.width % cfg.heads != 0 {
            return Err(shape_err!("width {} not divisible by {} heads", cfg.width, cfg.heads));
        }
        let token_embedding = candle_nn::embedding(cfg.vocab_size, cfg.width, vb.pp("token_embedding"))?;
        let positional_embedding = vb.get_with_hints(
            (cfg.context_len, cfg.width),
            "positional_embedding",
            candle_nn::Init::Randn { mean: 0.0, stdev: 0.01 },
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| ResidualBlock::new(cfg.width, cfg.heads, vb.pp("transformer.resblocks").pp(i)))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(cfg.width, 1e-5, vb.pp("ln_final"))?;
        let text_projection = vb.get_with_hints(
            (cfg.width, cfg.embed_dim),
            "text_projection",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: (cfg.width as f64).powf(-0.5),
            },
        )?;
        Ok(Self {
            token_embedding,
            positional_embedding,
            blocks,
            ln_final,
            text_projection,
            cfg,
        })
    }

    pub fn config(&self) -> TextEncoderConfig {
        self.cfg
    }

    fn causal_mask(l: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
        let data: Vec<f32> = (0..l)
            .flat_map(|i| (0..l).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
            .collect();
        Ok(Tensor::from_vec(data, (l, l), dev)?.to_dtype(dtype)?)
    }

    /// Encodes a batch into `(B, T)` embeddings read at each row's EOS position.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        if l > self.cfg.context_len {
            return Err(shape_err!("sequence length {l} exceeds context {}", self.cfg.context_len));
        }
        let vocab = self.cfg.vocab_size as u32;
        let max_id = batch.ids.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max_id >= vocab {
            return Err(Error::Tokenizer(format!("token id {max_id} outside vocabulary of {vocab}")));
        }
        let x = self.token_embedding.forward(&batch.ids)?;
        let pos = self.positional_embedding.narrow(0, 0, l)?;
        let mut x = x.broadcast_add(&pos)?;
        let mask = Self::causal_mask(l, x.dtype(), x.device())?;
        for block in &self.blocks {
            x = block.forward(&x, &mask)?;
        }
        let x = self.ln_final.forward(&x)?;
        let w = self.cfg.width;
        let flat = x.reshape((b * l, w))?;
        let idx: Vec<u32> = batch
            .eos_positions
            .iter()
            .enumerate()
            .map(|(i, p)| (i * l + p) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, b, x.device())?;
        let eos = flat.index_select(&idx, 0)?;
        Ok(eos.matmul(&self.text_projection)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::text::tokenizer::{Tokenizer, WordTokenizer};

    fn setup(context: usize) -> (TextEncoder, WordTokenizer) {
        let tok = WordTokenizer::from_corpus(["one lesion area upper left", "two lesion areas"]);
        let cfg = TextEncoderConfig {
            vocab_size: tok.vocab_size(),
            context_len: context,
            width: 32,
            layers: 2,
            heads: 2,
            embed_dim: 24,
        };
        let p = ParamStore::new(3);
        let enc = TextEncoder::new(cfg, p.var_builder(DType::F32, &Device::Cpu)).unwrap();
        (enc, tok)
    }

    fn encode(enc: &TextEncoder, tok: &WordTokenizer, qs: &[TextQuery]) -> Vec<Vec<f32>> {
        let refs: Vec<&TextQuery> = qs.iter().collect();
        let b = TokenBatch::from_queries(&refs, tok.eos_id(), &Device::Cpu).unwrap();
        enc.forward(&b).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn output_dimension_is_t() {
        let (enc, tok) = setup(20);
        let q = tok.tokenize("one lesion area", 20);
        let out = encode(&enc, &tok, &[q]);
        assert_eq!(out[0].len(), 24);
        assert!(out[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_does_not_change_embedding() {
        let (enc, tok) = setup(32);
        let short = tok.tokenize("two lesion areas", 8);
        let long = tok.tokenize("two lesion areas", 32);
        let mut manual = long.clone();
        // explicit extra padding and garbage beyond EOS must be ignored too
        for t in manual.token_ids[long.length..].iter_mut() {
            *t = 5;
        }
        let a = encode(&enc, &tok, &[short]);
        let b = encode(&enc, &tok, &[long]);
        let c = encode(&enc, &tok, &[manual]);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn batched_matches_single_rows() {
        let (enc, tok) = setup(20);
        let q1 = tok.tokenize("two lesion areas upper left", 20);
        let q2 = tok.tokenize("one", 20);
        let both = encode(&enc, &tok, &[q1.clone(), q2.clone()]);
        let a = encode(&enc, &tok, &[q1]);
        let b = encode(&enc, &tok, &[q2]);
        for (x, y) in both[0].iter().zip(a[0].iter()) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in both[1].iter().zip(b[0].iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_in_eval() {
        let (enc, tok) = setup(20);
        let q = tok.tokenize("one lesion area upper left", 20);
        assert_eq!(encode(&enc, &tok, &[q.clone()]), encode(&enc, &tok, &[q]));
    }

    #[test]
    fn missing_eos_is_an_error() {
        let (_, tok) = setup(20);
        let mut q = tok.tokenize("one", 20);
        q.token_ids[q.length - 1] = 7;
        assert!(TokenBatch::from_queries(&[&q], tok.eos_id(), &Device::Cpu).is_err());
    }

    #[test]
    fn different_text_different_embedding() {
        let (enc, tok) = setup(20);
        let a = encode(&enc, &tok, &[tok.tokenize("one lesion area", 20)]);
        let b = encode(&enc, &tok, &[tok.tokenize("two lesion areas", 20)]);
        assert_ne!(a, b);
    }
}
