//! Noise that turns a sequence into its corrupted counterpart.
//!
//! Masking selects a fixed fraction of body positions and applies the
//! 80/10/10 mask/random/keep rule, recording the original ids as MLM labels.
//! Shuffling permutes the body inside disjoint windows of `k` positions.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::corpus::{TokenSequence, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};

pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const RANDOM_TOKEN_PROB: f64 = 0.1;

/// Corruption applied to build `x̂` from `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Mask { rate: f64 },
    Shuffle { window: usize },
}

/// An original sequence, its corrupted version and MLM bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedPair {
    pub original: TokenSequence,
    pub corrupted: TokenSequence,
    /// `(position, original id)` for every position selected by masking,
    /// ascending by position. Always empty under shuffling.
    pub mlm_labels: Vec<(usize, usize)>,
}

/// Number of body positions masking selects from `maskable` candidates.
pub fn masked_count(maskable: usize, rate: f64) -> usize {
    if rate <= 0.0 || maskable == 0 {
        return 0;
    }
    ((rate * maskable as f64).round() as usize).clamp(1, maskable)
}

/// BERT-style masking of `round(rate · maskable)` body positions (at least one
/// when `rate > 0`).
pub fn mask_corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<CorruptedPair> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Corruption(format!(
            "mask rate {rate} outside [0, 1]"
        )));
    }
    let maskable = seq.body_range().len();
    if maskable == 0 {
        return Err(Error::Corruption(
            "sequence has no maskable positions".into(),
        ));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Corruption(
            "vocabulary has no non-special tokens".into(),
        ));
    }
    let count = masked_count(maskable, rate);
    let mut body = seq.body().to_vec();
    let mut picked = index::sample(rng, maskable, count).into_vec();
    picked.sort_unstable();
    let mut mlm_labels = Vec::with_capacity(count);
    for offset in picked {
        mlm_labels.push((offset + 1, body[offset]));
        let u: f64 = rng.random();
        if u < MASK_TOKEN_PROB {
            body[offset] = MASK;
        } else if u < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB {
            body[offset] = rng.random_range(NUM_SPECIALS..vocab_size);
        }
    }
    Ok(CorruptedPair {
        original: seq.clone(),
        corrupted: seq.with_body(&body),
        mlm_labels,
    })
}

/// Independent uniform permutation inside each consecutive window of `window`
/// body positions (the last window may be shorter).
pub fn shuffle_corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    window: usize,
    rng: &mut R,
) -> Result<CorruptedPair> {
    if window == 0 {
        return Err(Error::Corruption(
            "shuffle window must be at least 1".into(),
        ));
    }
    let mut body = seq.body().to_vec();
    for chunk in body.chunks_mut(window) {
        chunk.shuffle(rng);
    }
    Ok(CorruptedPair {
        original: seq.clone(),
        corrupted: seq.with_body(&body),
        mlm_labels: Vec::new(),
    })
}

pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    noise: Noise,
    vocab_size: usize,
    rng: &mut R,
) -> Result<CorruptedPair> {
    match noise {
        Noise::Mask { rate } => mask_corrupt(seq, rate, vocab_size, rng),
        Noise::Shuffle { window } => shuffle_corrupt(seq, window, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, PAD, SEP};
    use crate::rng::stream;

    fn seq(body: &[usize], pad: usize) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend_from_slice(body);
        ids.push(SEP);
        let len = ids.len();
        ids.extend(std::iter::repeat_n(PAD, pad));
        TokenSequence::from_parts(ids, len).unwrap()
    }

    #[test]
    fn fifteen_percent_of_twenty_is_three() {
        let s = seq(&(10..30).collect::<Vec<_>>(), 3);
        let pair = mask_corrupt(&s, 0.15, 100, &mut stream(1, 0)).unwrap();
        assert_eq!(pair.mlm_labels.len(), 3);
        for &(pos, id) in &pair.mlm_labels {
            assert!(pos >= 1 && pos < s.attention_len() - 1);
            assert_eq!(s.ids()[pos], id);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let s = seq(&[7, 8, 9], 2);
        let pair = mask_corrupt(&s, 0.0, 100, &mut stream(1, 0)).unwrap();
        assert_eq!(pair.corrupted, s);
        assert!(pair.mlm_labels.is_empty());
    }

    #[test]
    fn small_rate_still_masks_one() {
        let s = seq(&[7, 8], 0);
        let pair = mask_corrupt(&s, 0.01, 100, &mut stream(1, 0)).unwrap();
        assert_eq!(pair.mlm_labels.len(), 1);
    }

    #[test]
    fn nothing_to_mask_is_an_error() {
        let s = seq(&[], 2);
        assert!(matches!(
            mask_corrupt(&s, 0.15, 100, &mut stream(1, 0)),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn unit_window_is_identity() {
        let s = seq(&[5, 6, 7, 8, 9], 1);
        let pair = shuffle_corrupt(&s, 1, &mut stream(3, 0)).unwrap();
        assert_eq!(pair.corrupted, s);
        assert!(pair.mlm_labels.is_empty());
    }

    #[test]
    fn shuffling_stays_inside_windows() {
        let s = seq(&[10, 11, 12, 13, 14, 15, 16], 2);
        for t in 0..50 {
            let pair = shuffle_corrupt(&s, 3, &mut stream(t, 0)).unwrap();
            let body = pair.corrupted.body();
            let mut w: Vec<_> = body[..3].to_vec();
            w.sort();
            assert_eq!(w, [10, 11, 12]);
            let mut w: Vec<_> = body[3..6].to_vec();
            w.sort();
            assert_eq!(w, [13, 14, 15]);
            assert_eq!(body[6], 16);
        }
    }
}
