//! Plain-text corpora and the whitespace vocabulary used to batch them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{RngState, StreamRng};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercased whitespace tokens of one line.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ↔ id mapping. Ids 0–4 are the specials; the rest are ordered by
/// descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus file keeping the `max_size - 5` most
    /// frequent tokens.
    pub fn build(corpus_path: impl AsRef<Path>, max_size: usize) -> Result<Self> {
        let text = fs::read_to_string(corpus_path)?;
        Self::build_from_text(&text, max_size)
    }

    pub fn build_from_text(text: &str, max_size: usize) -> Result<Self> {
        if max_size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the {NUM_SPECIALS} specials"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for tok in text.lines().flat_map(tokenize) {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size - NUM_SPECIALS);

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Wraps an explicit token list; the first five must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Config(
                "vocabulary must start with the five special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] tokens… [SEP]` padded to `max_len`; out-of-vocabulary tokens map
    /// to `[UNK]` and the body is truncated to `max_len - 2` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 3, "sequence length must be at least 3");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .take(max_len - 2)
                .map(|t| self.id(&t).unwrap_or(UNK)),
        );
        ids.push(SEP);
        let attention_len = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence { ids, attention_len }
    }

    /// Body tokens (between `[CLS]` and `[SEP]`) joined by single spaces.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.body()
            .iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Encoded input of fixed length with `[CLS]` first and `[SEP]` before padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    attention_len: usize,
}

impl TokenSequence {
    pub fn from_parts(ids: Vec<usize>, attention_len: usize) -> Result<Self> {
        let ok = attention_len >= 2
            && attention_len <= ids.len()
            && ids[0] == CLS
            && ids[attention_len - 1] == SEP
            && ids[attention_len..].iter().all(|&i| i == PAD);
        if !ok {
            return Err(Error::Contract(format!(
                "malformed token sequence (attention_len {attention_len}): {ids:?}"
            )));
        }
        Ok(Self { ids, attention_len })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn attention_len(&self) -> usize {
        self.attention_len
    }

    /// Non-padding prefix, `[CLS]` through `[SEP]`.
    pub fn active(&self) -> &[usize] {
        &self.ids[..self.attention_len]
    }

    /// Positions that may be corrupted: everything strictly between `[CLS]`
    /// and `[SEP]`.
    pub fn body_range(&self) -> std::ops::Range<usize> {
        1..self.attention_len - 1
    }

    pub fn body(&self) -> &[usize] {
        &self.ids[self.body_range()]
    }

    pub(crate) fn with_body(&self, body: &[usize]) -> Self {
        let mut ids = self.ids.clone();
        ids[self.body_range()].copy_from_slice(body);
        Self {
            ids,
            attention_len: self.attention_len,
        }
    }
}

/// Documents of a plain-text corpus, one per nonblank line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    lines: Vec<String>,
}

impl Corpus {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(str::to_string))
    }

    pub fn from_lines(lines: impl IntoIterator<Item = String>) -> Result<Self> {
        let lines: Vec<String> = lines.into_iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { lines })
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// Draws batches of `batch_size` lines uniformly with replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch_size: usize,
    max_len: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(batch_size: usize, max_len: usize, rng: StreamRng) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        Self {
            batch_size,
            max_len,
            rng,
        }
    }

    pub fn next_batch(&mut self, corpus: &Corpus, vocab: &Vocabulary) -> Vec<TokenSequence> {
        (0..self.batch_size)
            .map(|_| {
                let line = &corpus.lines[self.rng.random_range(0..corpus.len())];
                vocab.encode(line, self.max_len)
            })
            .collect()
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng_state(&mut self, state: &RngState) {
        self.rng = state.restore();
    }
}

/// Infinite stream of batches drawn by a [`BatchSampler`].
pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    vocab: &'a Vocabulary,
    sampler: BatchSampler,
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<TokenSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.sampler.next_batch(self.corpus, self.vocab))
    }
}

pub fn batch_iterator<'a>(
    corpus: &'a Corpus,
    vocab: &'a Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> BatchIter<'a> {
    BatchIter {
        corpus,
        vocab,
        sampler: BatchSampler::new(batch_size, max_len, crate::rng::stream(seed, 0)),
    }
}
