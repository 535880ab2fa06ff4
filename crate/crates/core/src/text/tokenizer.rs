//! Referring-expression tokenizers.
//!
//! Two implementations share the [`Tokenizer`] trait: the CLIP byte-pair encoder (used with
//! pretrained weights) and a closed-vocabulary word tokenizer for from-scratch runs.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use regex::Regex;

use crate::config::CLIP_BPE_VOCAB_SIZE;
use crate::error::{Error, Result};

/// A tokenized expression, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextQuery {
    pub raw: String,
    /// `SOS body… EOS pad…`, always `max_len` entries.
    pub token_ids: Vec<u32>,
    /// Number of tokens up to and including EOS.
    pub length: usize,
}

impl TextQuery {
    pub fn eos_position(&self) -> usize {
        self.length - 1
    }
}

pub trait Tokenizer: Send + Sync {
    /// Body tokens of `raw`, without sentinels.
    fn encode_body(&self, raw: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
    fn pad_id(&self) -> u32;
    fn sos_id(&self) -> u32;
    fn eos_id(&self) -> u32;

    /// Brackets the body with SOS/EOS, keeps at most `max_len − 2` body tokens and pads to
    /// `max_len`.
    fn tokenize(&self, raw: &str, max_len: usize) -> TextQuery {
        assert!(max_len >= 2, "max_len must be at least 2");
        let body = self.encode_body(raw);
        let keep = body.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(self.sos_id());
        ids.extend_from_slice(&body[..keep]);
        ids.push(self.eos_id());
        let length = ids.len();
        ids.resize(max_len, self.pad_id());
        TextQuery {
            raw: raw.to_string(),
            token_ids: ids,
            length,
        }
    }
}

fn word_pattern() -> Regex {
    Regex::new(r"[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").unwrap()
}

/// Lowercase word-level tokenizer with byte-piece fallback for unknown words.
///
/// Layout: `<pad>`, `<sos>`, `<eos>`, 256 byte pieces `<0xNN>`, then the sorted word list.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    sos: u32,
    eos: u32,
    pattern: Regex,
}

const BYTE_BASE: u32 = 3;

impl WordTokenizer {
    /// Builds a vocabulary covering every word in `corpus`.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let pattern = word_pattern();
        let mut words = BTreeSet::new();
        for text in corpus {
            for m in pattern.find_iter(&text.to_lowercase()) {
                words.insert(m.as_str().to_string());
            }
        }
        let mut tokens = vec!["<pad>".to_string(), "<sos>".into(), "<eos>".into()];
        tokens.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        tokens.extend(words);
        Self::from_tokens(tokens, 0, 1, 2)
    }

    fn from_tokens(tokens: Vec<String>, pad: u32, sos: u32, eos: u32) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            pad,
            sos,
            eos,
            pattern: word_pattern(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Newline-delimited token list preceded by a header line naming the sentinel ids.
    pub fn to_vocab_string(&self) -> String {
        let mut s = format!("#vocab pad={} sos={} eos={}\n", self.pad, self.sos, self.eos);
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse_vocab(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Tokenizer("empty vocabulary file".into()))?;
        let rest = header
            .strip_prefix("#vocab")
            .ok_or_else(|| Error::Tokenizer(format!("bad vocabulary header `{header}`")))?;
        let mut ids: HashMap<&str, u32> = HashMap::new();
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Tokenizer(format!("bad header field `{field}`")))?;
            let v: u32 = v
                .parse()
                .map_err(|_| Error::Tokenizer(format!("bad id in `{field}`")))?;
            ids.insert(k, v);
        }
        let get = |k: &str| {
            ids.get(k)
                .copied()
                .ok_or_else(|| Error::Tokenizer(format!("header lacks `{k}`")))
        };
        let (pad, sos, eos) = (get("pad")?, get("sos")?, get("eos")?);
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        for id in [pad, sos, eos] {
            if id as usize >= tokens.len() {
                return Err(Error::Tokenizer(format!("sentinel id {id} out of range")));
            }
        }
        Ok(Self::from_tokens(tokens, pad, sos, eos))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vocab_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_vocab(&s)
    }
}

impl Tokenizer for WordTokenizer {
    fn encode_body(&self, raw: &str) -> Vec<u32> {
        let lower = raw.to_lowercase();
        let mut out = Vec::new();
        for m in self.pattern.find_iter(&lower) {
            match self.index.get(m.as_str()) {
                Some(&id) => out.push(id),
                None => out.extend(m.as_str().bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
    fn pad_id(&self) -> u32 {
        self.pad
    }
    fn sos_id(&self) -> u32 {
        self.sos
    }
    fn eos_id(&self) -> u32 {
        self.eos
    }
}

/// GPT-2 style reversible byte → printable-char table.
fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut cs = bs.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !bs.contains(&b) {
            bs.push(b);
            cs.push(256 + n);
            n += 1;
        }
    }
    let mut table = vec![' '; 256];
    for (b, c) in bs.into_iter().zip(cs) {
        table[b as usize] = char::from_u32(c).unwrap();
    }
    table
}

/// CLIP's byte-level BPE.
///
/// Vocabulary order: 256 byte symbols, the same with `</w>`, one entry per merge, then
/// `<|startoftext|>` and `<|endoftext|>`. The pad id is 0, as in CLIP.
pub struct BpeTokenizer {
    byte_table: Vec<char>,
    ranks: HashMap<(String, String), usize>,
    encoder: HashMap<String, u32>,
    sos: u32,
    eos: u32,
    pattern: Regex,
    cache: std::sync::Mutex<HashMap<String, Vec<u32>>>,
}

impl BpeTokenizer {
    /// Builds from merge-file text (first line is a version header). Uses the first
    /// `vocab_budget − 256 − 2` merges, which gives CLIP's table for a budget of 49,152.
    pub fn from_merges(text: &str, vocab_budget: usize) -> Result<Self> {
        let n_merges = vocab_budget
            .checked_sub(256 + 2)
            .ok_or_else(|| Error::Tokenizer("vocabulary budget too small".into()))?;
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .take(n_merges)
            .map(|l| {
                let mut it = l.split_whitespace();
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Tokenizer(format!("bad merge line `{l}`"))),
                }
            })
            .collect::<Result<_>>()?;
        let byte_table = bytes_to_unicode();
        let mut vocab: Vec<String> = byte_table.iter().map(|c| c.to_string()).collect();
        vocab.extend(byte_table.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let encoder: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let sos = encoder["<|startoftext|>"];
        let eos = encoder["<|endoftext|>"];
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .unwrap();
        Ok(Self {
            byte_table,
            ranks,
            encoder,
            sos,
            eos,
            pattern,
            cache: Default::default(),
        })
    }

    /// Loads a merge table, plain text or gzip (`bpe_simple_vocab_16e6.txt.gz`).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut s = String::new();
            flate2::read::GzDecoder::new(&bytes[..])
                .read_to_string(&mut s)
                .map_err(|e| Error::io(path, e))?;
            s
        } else {
            String::from_utf8(bytes)
                .map_err(|_| Error::Tokenizer(format!("{} is not utf-8", path.display())))?
        };
        Self::from_merges(&text, CLIP_BPE_VOCAB_SIZE)
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            if word.len() < 2 {
                break;
            }
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            let Some((a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode_body(&self, raw: &str) -> Vec<u32> {
        let cleaned = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut out = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece = m.as_str();
            if let Some(ids) = self.cache.lock().unwrap().get(piece) {
                out.extend_from_slice(ids);
                continue;
            }
            let mapped: String = piece.bytes().map(|b| self.byte_table[b as usize]).collect();
            let ids: Vec<u32> = self
                .bpe(&mapped)
                .iter()
                .flat_map(|sym| match self.encoder.get(sym) {
                    Some(&id) => vec![id],
                    // every single byte symbol is in the vocabulary, so split back into them
                    None => sym
                        .trim_end_matches("</w>")
                        .chars()
                        .map(|c| self.encoder[&c.to_string()])
                        .collect(),
                })
                .collect();
            self.cache
                .lock()
                .unwrap()
                .insert(piece.to_string(), ids.clone());
            out.extend(ids);
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }
    fn pad_id(&self) -> u32 {
        0
    }
    fn sos_id(&self) -> u32 {
        self.sos
    }
    fn eos_id(&self) -> u32 {
        self.eos
    }
}
