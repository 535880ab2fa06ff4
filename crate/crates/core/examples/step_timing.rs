//! Times forward/backward steps of a configuration on synthetic data.
//!
//! `cargo run --example step_timing -- image_size=64 batch_size=8`

use std::time::Instant;

use candle_core::Device;
use refseg::data::{generate_synthetic, synthetic_split, Split, SyntheticSpec};
use refseg::text::{Tokenizer, WordTokenizer};
use refseg::training::{train_step, Adam};
use refseg::{RunConfig, SegModel};

fn main() -> refseg::Result<()> {
    let mut table = toml::Table::new();
    for arg in std::env::args().skip(1) {
        let (k, v) = RunConfig::parse_override(&arg)?;
        table.insert(k, v);
    }
    let mut cfg = RunConfig::tiny().overlay(table)?;
    let spec = SyntheticSpec {
        n_train: cfg.batch_size * 4,
        n_val: 1,
        n_test: 1,
        image_size: cfg.image_size,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec)?;
    let train = synthetic_split(&records, Split::Train, &cfg)?;
    let tok = WordTokenizer::from_corpus(train.texts());
    cfg.vocab_size = tok.vocab_size();
    let model = SegModel::new(&cfg, &Device::Cpu)?;
    println!("{} parameters", model.params().num_elements());
    let mut adam = Adam::new(model.trainable_params());
    let idx: Vec<usize> = (0..train.len()).collect();
    for (i, chunk) in idx.chunks(cfg.batch_size).enumerate() {
        let batch = train.batch(chunk, &tok, cfg.max_text_len, None, &Device::Cpu)?;
        let t = Instant::now();
        let l = train_step(&model, &batch, &mut adam, cfg.lambda, cfg.lr, (0, i))?;
        println!("step {i}: {:.3}s  L_c={:.4} L_s={:.4}", t.elapsed().as_secs_f64(), l.l_c, l.l_s);
    }
    Ok(())
}
