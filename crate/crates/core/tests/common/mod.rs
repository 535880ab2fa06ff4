#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use refseg::config::RunConfig;
use refseg::data::{self, Dataset, Split, SyntheticSpec};
use refseg::text::{Tokenizer, WordTokenizer};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// A model small enough for unit-level training tests (32×32 inputs).
pub fn micro_config() -> RunConfig {
    RunConfig {
        image_size: 32,
        text_width: 16,
        text_heads: 2,
        text_layers: 1,
        text_dim: 16,
        stem_channels: 4,
        stage_channels: vec![8, 8, 8],
        stage_blocks: vec![1, 1, 1],
        masker_channels: 4,
        fusion_channels: 4,
        decoder_channels: 4,
        carafe_kernel: 3,
        carafe_compressed_channels: 4,
        batch_size: 4,
        lr: 1e-3,
        max_epochs: 3,
        patience: 3,
        ..RunConfig::tiny()
    }
}

pub struct SynthData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub tokenizer: WordTokenizer,
}

pub fn synth(spec: &SyntheticSpec, cfg: &mut RunConfig) -> SynthData {
    let records = data::generate_synthetic(spec).unwrap();
    let train = data::synthetic_split(&records, Split::Train, cfg).unwrap();
    let val = data::synthetic_split(&records, Split::Val, cfg).unwrap();
    let test = data::synthetic_split(&records, Split::Test, cfg).unwrap();
    let tokenizer = WordTokenizer::from_corpus(train.texts());
    cfg.vocab_size = tokenizer.vocab_size();
    SynthData {
        train,
        val,
        test,
        tokenizer,
    }
}

pub mod gradcheck;
pub mod oracle;

/// One deterministic batch from a small synthetic set for `cfg` (vocab resolved in place).
pub fn micro_batch(cfg: &mut RunConfig, n: usize) -> (refseg::data::Batch, WordTokenizer) {
    let spec = SyntheticSpec {
        n_train: n,
        n_val: 1,
        n_test: 1,
        image_size: cfg.image_size,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let d = synth(&spec, cfg);
    let idx: Vec<usize> = (0..n).collect();
    let batch = d
        .train
        .batch(&idx, &d.tokenizer, cfg.max_text_len, None, &Device::Cpu)
        .unwrap();
    (batch, d.tokenizer)
}
