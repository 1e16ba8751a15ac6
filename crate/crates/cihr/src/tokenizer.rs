//! Word-level tokenization, vocabulary, sequence layout and embeddings.
//!
//! Texts are lowercased and split on whitespace/punctuation boundaries.
//! Reserved ids: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3. `encode_pair` lays a
//! text (and optionally an analysis span) out as
//! `[CLS] x [SEP] (analysis [SEP])? [PAD]…` with segment 1 on the analysis
//! span, mirroring a BERT-style pair encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::numerics::{ops, NumericsError, SplitMix64, Tape, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocab file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed vocab file: {0}")]
    Malformed(String),
}

/// Lowercase word tokenizer: alphanumeric runs are tokens, every other
/// non-whitespace character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub corpus_hash: String,
    pub min_freq: usize,
}

impl Vocab {
    /// Deterministic vocabulary: tokens with corpus frequency ≥ `min_freq`,
    /// ordered by (count desc, token asc), ids starting after the reserved
    /// block.
    pub fn build(corpus: &[String], min_freq: usize) -> Result<Vocab, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
            corpus_hash: corpus_sha256(corpus),
            min_freq,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode_tokens(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Line-oriented vocab file: comment header, then one learned token per
    /// line (line number = id − reserved count).
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# cihr-vocab v1")?;
        writeln!(f, "# corpus_hash={}", self.corpus_hash)?;
        writeln!(f, "# min_freq={}", self.min_freq)?;
        for token in &self.id_to_token[RESERVED..] {
            writeln!(f, "{token}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut corpus_hash = String::new();
        let mut min_freq = 1;
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for line in f.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(h) = rest.strip_prefix("corpus_hash=") {
                    corpus_hash = h.to_string();
                } else if let Some(m) = rest.strip_prefix("min_freq=") {
                    min_freq = m
                        .parse()
                        .map_err(|_| TokenizerError::Malformed(format!("min_freq `{m}`")))?;
                }
                continue;
            }
            if !line.is_empty() {
                id_to_token.push(line);
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
            corpus_hash,
            min_freq,
        })
    }

    /// Stable digest over the id-ordered token list.
    pub fn table_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

pub fn corpus_sha256(corpus: &[String]) -> String {
    let mut h = Sha256::new();
    for text in corpus {
        h.update(text.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One encoded sequence: padded ids, segment ids, attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<u8>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All-padding placeholder for absent dynamic posts.
    pub fn all_pad(len: usize) -> TokenSequence {
        TokenSequence {
            ids: vec![PAD; len],
            segments: vec![0; len],
            mask: vec![0; len],
        }
    }
}

/// Encode `x` (and an optional analysis span) into the fixed layout
/// `[CLS] x [SEP] (analysis [SEP])? [PAD]…` of length `max_len`. When over
/// budget, tail tokens are dropped from whichever span is currently longer,
/// so both [SEP]s always survive.
pub fn encode_pair(vocab: &Vocab, x: &str, analysis: Option<&str>, max_len: usize) -> TokenSequence {
    assert!(max_len >= 4, "sequence length must be at least 4");
    let mut x_ids = vocab.encode_tokens(x);
    match analysis {
        None => {
            let budget = max_len - 2; // [CLS] + [SEP]
            x_ids.truncate(budget);
            layout(&x_ids, None, max_len)
        }
        Some(a) => {
            let mut a_ids = vocab.encode_tokens(a);
            let budget = max_len - 3; // [CLS] + two [SEP]
            while x_ids.len() + a_ids.len() > budget {
                if x_ids.len() >= a_ids.len() {
                    x_ids.pop();
                } else {
                    a_ids.pop();
                }
            }
            layout(&x_ids, Some(&a_ids), max_len)
        }
    }
}

fn layout(x_ids: &[usize], a_ids: Option<&[usize]>, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    segments.push(0u8);
    ids.extend_from_slice(x_ids);
    segments.extend(std::iter::repeat(0u8).take(x_ids.len()));
    ids.push(SEP);
    segments.push(0);
    if let Some(a_ids) = a_ids {
        ids.extend_from_slice(a_ids);
        segments.extend(std::iter::repeat(1u8).take(a_ids.len()));
        ids.push(SEP);
        segments.push(1);
    }
    let mask: Vec<u8> = std::iter::repeat(1u8)
        .take(ids.len())
        .chain(std::iter::repeat(0u8))
        .take(max_len)
        .collect();
    while ids.len() < max_len {
        ids.push(PAD);
        segments.push(0);
    }
    TokenSequence {
        ids,
        segments,
        mask,
    }
}

/// Word + position + segment embedding tables, all model-width.
pub struct EmbeddingTables {
    pub word: Tensor,    // [V×d]
    pub position: Tensor, // [L×d]
    pub segment: Tensor, // [2×d]
}

impl EmbeddingTables {
    pub fn init(vocab_size: usize, max_len: usize, d: usize, rng: &mut SplitMix64) -> Self {
        // token vectors at unit scale so content survives the first
        // attention sublayer of an untrained stack
        let std = 1.0 / (d as f64).sqrt();
        let normal = |n: usize, rng: &mut SplitMix64| -> Vec<f64> {
            (0..n).map(|_| rng.next_normal() * std).collect()
        };
        EmbeddingTables {
            word: Tensor::param(vec![vocab_size, d], normal(vocab_size * d, rng)),
            position: Tensor::param(vec![max_len, d], normal(max_len * d, rng)),
            segment: Tensor::param(vec![2, d], normal(2 * d, rng)),
        }
    }

    /// Sum of word, position and segment rows per position → [L×d].
    pub fn embed(&self, tape: &Tape, seq: &TokenSequence) -> Result<Tensor, NumericsError> {
        let w = ops::embedding_lookup(tape, &self.word, &seq.ids)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let p = ops::embedding_lookup(tape, &self.position, &positions)?;
        let segs: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        let s = ops::embedding_lookup(tape, &self.segment, &segs)?;
        Ok(ops::add(tape, &ops::add(tape, &w, &p), &s))
    }
}
