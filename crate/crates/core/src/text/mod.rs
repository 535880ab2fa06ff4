//! Expression tokenization and text encoding.

pub mod encoder;
pub mod tokenizer;

pub use encoder::{TextEncoder, TextEncoderConfig, TokenBatch};
pub use tokenizer::{BpeTokenizer, TextQuery, Tokenizer, WordTokenizer};

use std::path::Path;

use crate::config::{RunConfig, TokenizerKind};
use crate::error::{Error, Result};

/// Builds the configured tokenizer.
///
/// The word tokenizer loads `vocab_path` when set and otherwise collects the vocabulary from
/// `corpus`; its serialized vocabulary is returned so it can travel with checkpoints. The BPE
/// tokenizer requires `vocab_path` to point at a merges file (optionally gzipped).
pub fn build_tokenizer<'a>(
    cfg: &RunConfig,
    corpus: impl IntoIterator<Item = &'a str>,
) -> Result<(Box<dyn Tokenizer>, Option<String>)> {
    match cfg.tokenizer {
        TokenizerKind::Word => {
            let tok = if cfg.vocab_path.is_empty() {
                WordTokenizer::from_corpus(corpus)
            } else {
                WordTokenizer::load(Path::new(&cfg.vocab_path))?
            };
            let vocab = tok.to_vocab_string();
            Ok((Box::new(tok), Some(vocab)))
        }
        TokenizerKind::Bpe => {
            if cfg.vocab_path.is_empty() {
                return Err(Error::Config("the bpe tokenizer needs vocab_path (a merges file)".into()));
            }
            Ok((Box::new(BpeTokenizer::load(Path::new(&cfg.vocab_path))?), None))
        }
    }
}

/// Rebuilds a tokenizer from a vocabulary stored alongside a checkpoint, falling back to the
/// configured source.
pub fn restore_tokenizer(cfg: &RunConfig, stored_vocab: Option<&str>) -> Result<Box<dyn Tokenizer>> {
    match (cfg.tokenizer, stored_vocab) {
        (TokenizerKind::Word, Some(v)) => Ok(Box::new(WordTokenizer::parse_vocab(v)?)),
        _ => Ok(build_tokenizer(cfg, std::iter::empty())?.0),
    }
}
