//! Post-norm transformer encoder and the aggregation head.
//!
//! Batches are packed: only the `attention_len` active positions of each
//! sequence are materialized, one segment per sequence, and attention never
//! crosses a segment boundary. This is exactly what a padding mask computes
//! for the active positions, and padded positions are never read downstream.
//!
//! Parameter count, with `V` vocabulary, `m` max length, `d` hidden, `f` FFN
//! inner, `L` layers, `a` aggregation inner and `o` aggregation output size:
//!
//! ```text
//! V·d + m·d                       token and position embeddings
//! + L·(4·(d² + d)                 query, key, value, output projections
//!      + 2·d·f + f + d            feed-forward
//!      + 4·d)                     two layer norms
//! + d·a + a + a·o + o             aggregation MLP
//! + V                             MLM output bias
//! ```

use rand::Rng;

use crate::config::{EncoderConfig, Pooling};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::tape::{Segment, Tape, Var, LAYER_NORM_EPS};
use crate::tensor::Tensor;

pub const TOKEN_EMBEDDING: &str = "embeddings.token";
pub const POSITION_EMBEDDING: &str = "embeddings.position";
pub const MLM_BIAS: &str = "mlm.bias";

/// Closed-form number of scalar parameters created by [`init_params`].
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    let (v, m, d, f, l) = (
        cfg.vocab_size,
        cfg.max_len,
        cfg.hidden,
        cfg.ffn_inner,
        cfg.layers,
    );
    let (a, o) = (cfg.agg_inner, cfg.agg_out);
    v * d + m * d + l * (4 * (d * d + d) + 2 * d * f + f + d + 4 * d) + d * a + a + a * o + o + v
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layers.{l}.{part}")
}

/// Fresh parameters: weights ~ N(0, 0.02²), biases 0, layer-norm gains 1.
pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Params {
    let (d, f) = (cfg.hidden, cfg.ffn_inner);
    let mut p = Params::new();
    p.init_normal(TOKEN_EMBEDDING, cfg.vocab_size, d, rng);
    p.init_normal(POSITION_EMBEDDING, cfg.max_len, d, rng);
    for l in 0..cfg.layers {
        for proj in ["query", "key", "value", "output"] {
            p.init_normal(&layer_name(l, &format!("attn.{proj}.weight")), d, d, rng);
            p.init_const(&layer_name(l, &format!("attn.{proj}.bias")), d, 0.0);
        }
        p.init_const(&layer_name(l, "attn_norm.gain"), d, 1.0);
        p.init_const(&layer_name(l, "attn_norm.bias"), d, 0.0);
        p.init_normal(&layer_name(l, "ffn.inner.weight"), d, f, rng);
        p.init_const(&layer_name(l, "ffn.inner.bias"), f, 0.0);
        p.init_normal(&layer_name(l, "ffn.outer.weight"), f, d, rng);
        p.init_const(&layer_name(l, "ffn.outer.bias"), d, 0.0);
        p.init_const(&layer_name(l, "ffn_norm.gain"), d, 1.0);
        p.init_const(&layer_name(l, "ffn_norm.bias"), d, 0.0);
    }
    p.init_normal("agg.inner.weight", d, cfg.agg_inner, rng);
    p.init_const("agg.inner.bias", cfg.agg_inner, 0.0);
    p.init_normal("agg.outer.weight", cfg.agg_inner, cfg.agg_out, rng);
    p.init_const("agg.outer.bias", cfg.agg_out, 0.0);
    p.init_const(MLM_BIAS, cfg.vocab_size, 0.0);
    p
}

/// Hidden states of a packed batch: row `segments[b].start + i` holds position
/// `i` of sequence `b`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub segments: Vec<Segment>,
    pub max_len: usize,
}

impl Encoded {
    pub fn batch_size(&self) -> usize {
        self.segments.len()
    }

    /// Packed row of `position` in sequence `batch`.
    pub fn row(&self, batch: usize, position: usize) -> Result<usize> {
        let seg = self.segments.get(batch).ok_or(Error::Index {
            index: batch,
            len: self.segments.len(),
        })?;
        if position >= seg.len {
            return Err(Error::Index {
                index: position,
                len: seg.len,
            });
        }
        Ok(seg.start + position)
    }

    /// `n×m×d` view with zero rows at padded positions.
    pub fn padded(&self, tape: &Tape) -> Tensor {
        let h = tape.value(self.hidden);
        let d = h.cols();
        let mut out = vec![0.0; self.segments.len() * self.max_len * d];
        for (b, seg) in self.segments.iter().enumerate() {
            let dst = &mut out[b * self.max_len * d..][..seg.len * d];
            dst.copy_from_slice(&h.data()[seg.start * d..(seg.start + seg.len) * d]);
        }
        Tensor::new(vec![self.segments.len(), self.max_len, d], out).expect("consistent shape")
    }

    /// Rows of the `[CLS]` position, one per sequence.
    pub fn cls(&self, tape: &mut Tape) -> Result<Var> {
        let rows: Vec<usize> = self.segments.iter().map(|s| s.start).collect();
        tape.embedding_gather(self.hidden, &rows)
    }
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Runs the encoder. Passing an RNG enables dropout (training mode).
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    batch: &[TokenSequence],
    mut rng: Option<&mut R>,
) -> Result<Encoded> {
    if batch.is_empty() {
        return Err(Error::dim("encode", "empty batch"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for seq in batch {
        if seq.len() > cfg.max_len {
            return Err(Error::dim(
                "encode",
                format!(
                    "sequence length {} exceeds max_len {}",
                    seq.len(),
                    cfg.max_len
                ),
            ));
        }
        segments.push(Segment {
            start: ids.len(),
            len: seq.attention_len(),
        });
        ids.extend_from_slice(seq.active());
        positions.extend(0..seq.attention_len());
    }

    let tok = tape.embedding_gather(bound.get(TOKEN_EMBEDDING)?, &ids)?;
    let pos = tape.embedding_gather(bound.get(POSITION_EMBEDDING)?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    x = tape.dropout(x, cfg.dropout, rng.as_deref_mut())?;

    for l in 0..cfg.layers {
        let q = linear(tape, bound, x, &layer_name(l, "attn.query"))?;
        let k = linear(tape, bound, x, &layer_name(l, "attn.key"))?;
        let v = linear(tape, bound, x, &layer_name(l, "attn.value"))?;
        let attended = tape.attention(q, k, v, &segments, cfg.heads)?;
        let mut o = linear(tape, bound, attended, &layer_name(l, "attn.output"))?;
        o = tape.dropout(o, cfg.dropout, rng.as_deref_mut())?;
        let res = tape.add(x, o)?;
        x = tape.layer_norm(
            res,
            bound.get(&layer_name(l, "attn_norm.gain"))?,
            bound.get(&layer_name(l, "attn_norm.bias"))?,
            LAYER_NORM_EPS,
        )?;

        let inner = linear(tape, bound, x, &layer_name(l, "ffn.inner"))?;
        let act = tape.gelu(inner);
        let mut out = linear(tape, bound, act, &layer_name(l, "ffn.outer"))?;
        out = tape.dropout(out, cfg.dropout, rng.as_deref_mut())?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(
            res,
            bound.get(&layer_name(l, "ffn_norm.gain"))?,
            bound.get(&layer_name(l, "ffn_norm.bias"))?,
            LAYER_NORM_EPS,
        )?;
    }

    Ok(Encoded {
        hidden: x,
        segments,
        max_len: cfg.max_len,
    })
}

/// Unit-norm global representation of each sequence: pooled hidden state →
/// linear → GELU → linear → ℓ2 normalization.
pub fn aggregate(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    enc: &Encoded,
) -> Result<Var> {
    let pooled = match cfg.pooling {
        Pooling::Cls => enc.cls(tape)?,
        Pooling::Mean => tape.segment_mean(enc.hidden, &enc.segments)?,
    };
    let inner = linear(tape, bound, pooled, "agg.inner")?;
    let act = tape.gelu(inner);
    let out = linear(tape, bound, act, "agg.outer")?;
    tape.l2_normalize_rows(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::rng::{stream, StreamRng};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            hidden: 8,
            ffn_inner: 16,
            agg_inner: 12,
            agg_out: 8,
            max_len: 10,
            vocab_size: 12,
            ..EncoderConfig::tiny()
        }
    }

    fn batch(vocab: &Vocabulary, texts: &[&str], m: usize) -> Vec<TokenSequence> {
        texts.iter().map(|t| vocab.encode(t, m)).collect()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build_from_text("a b c d e f g", 12).unwrap()
    }

    #[test]
    fn parameter_count_matches_formula() {
        for c in [cfg(), EncoderConfig::tiny(), EncoderConfig::desk()] {
            let p = init_params(&c, &mut stream(0, 0));
            assert_eq!(p.num_elements(), parameter_count(&c));
        }
    }

    #[test]
    fn output_shape_and_eval_determinism() {
        let c = cfg();
        let params = init_params(&c, &mut stream(1, 0));
        let v = vocab();
        let b = batch(&v, &["a b c", "d e", "f g a b c d"], c.max_len);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let bound = params.attach(&mut tape).unwrap();
            let enc = encode::<StreamRng>(&mut tape, &bound, &c, &b, None).unwrap();
            let _ = seed;
            enc.padded(&tape)
        };
        let out = run(1);
        assert_eq!(out.shape(), &[3, c.max_len, c.hidden]);
        assert_eq!(out, run(2));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let c = EncoderConfig {
            dropout: 0.5,
            ..cfg()
        };
        let params = init_params(&c, &mut stream(1, 0));
        let b = batch(&vocab(), &["a b c"], c.max_len);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let bound = params.attach(&mut tape).unwrap();
            let mut rng = stream(seed, 9);
            let enc = encode(&mut tape, &bound, &c, &b, Some(&mut rng)).unwrap();
            enc.padded(&tape)
        };
        assert_ne!(run(1), run(2));
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn aggregate_rows_are_unit_and_repeatable() {
        let c = cfg();
        let params = init_params(&c, &mut stream(4, 0));
        let b = batch(&vocab(), &["a b", "c d e", "a b"], c.max_len);
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape).unwrap();
        let enc = encode::<StreamRng>(&mut tape, &bound, &c, &b, None).unwrap();
        let s = aggregate(&mut tape, &bound, &c, &enc).unwrap();
        let s = tape.value(s);
        for r in 0..3 {
            let norm = s.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.row(0), s.row(2));
    }

    #[test]
    fn mean_pooling_variant_runs() {
        let c = EncoderConfig {
            pooling: Pooling::Mean,
            ..cfg()
        };
        let params = init_params(&c, &mut stream(4, 0));
        let b = batch(&vocab(), &["a b", "c d e"], c.max_len);
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape).unwrap();
        let enc = encode::<StreamRng>(&mut tape, &bound, &c, &b, None).unwrap();
        let s = aggregate(&mut tape, &bound, &c, &enc).unwrap();
        assert_eq!(tape.shape(s), &[2, 8]);
    }

    #[test]
    fn sequence_longer_than_config_is_rejected() {
        let c = cfg();
        let params = init_params(&c, &mut stream(4, 0));
        let b = batch(&vocab(), &["a b"], c.max_len + 2);
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape).unwrap();
        assert!(matches!(
            encode::<StreamRng>(&mut tape, &bound, &c, &b, None),
            Err(Error::Dimension { .. })
        ));
    }
}
