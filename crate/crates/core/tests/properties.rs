mod common;

use capt_core::contrastive::{capt_loss, capt_loss_value, capt_terms, MemoryQueue};
use capt_core::corpus::{TokenSequence, CLS, PAD, SEP};
use capt_core::diagnostics::{random_matrix, random_unit_rows};
use capt_core::encoder::{aggregate, encode, init_params, MLM_BIAS, TOKEN_EMBEDDING};
use capt_core::mlm::{mlm_loss, MlmLabel};
use capt_core::rng::{stream, StreamRng};
use capt_core::{EncoderConfig, Params, Tape, Tensor};
use common::{dot, naive_loss, random_orthogonal, rotate};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn unit_rows_or_none(rows: usize, cols: usize, rng: &mut StreamRng) -> Option<Tensor> {
    (rows > 0).then(|| random_unit_rows(rows, cols, rng))
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn_inner: 16,
        agg_inner: 12,
        agg_out: 6,
        max_len: 12,
        vocab_size: 20,
        ..EncoderConfig::tiny()
    }
}

fn random_sequence(rng: &mut StreamRng, cfg: &EncoderConfig) -> TokenSequence {
    let body = rng.random_range(1..=cfg.max_len - 2);
    let mut ids = vec![CLS];
    ids.extend((0..body).map(|_| rng.random_range(5..cfg.vocab_size)));
    ids.push(SEP);
    let len = ids.len();
    TokenSequence::from_parts(ids, len).unwrap()
}

fn eval_aggregate(params: &Params, cfg: &EncoderConfig, batch: &[TokenSequence]) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.attach(&mut tape).unwrap();
    let enc = encode::<StreamRng>(&mut tape, &bound, cfg, batch, None).unwrap();
    let s = aggregate(&mut tape, &bound, cfg, &enc).unwrap();
    tape.value(s).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_is_bounded_fifo(seed in any::<u64>(), cap in 0usize..24, n in 1usize..5, k in 0usize..8, d in 2usize..6) {
        prop_assume!(cap == 0 || cap >= 2 * n);
        let mut rng = stream(seed, 0);
        let mut queue = MemoryQueue::new(cap, d);
        let mut pushed = Vec::new();
        for _ in 0..k {
            let s = random_unit_rows(n, d, &mut rng);
            let h = random_unit_rows(n, d, &mut rng);
            queue.enqueue_batch(&s, &h).unwrap();
            pushed.extend((0..n).map(|i| s.row(i).to_vec()));
            pushed.extend((0..n).map(|i| h.row(i).to_vec()));
        }
        prop_assert_eq!(queue.len(), cap.min(2 * n * k));
        let kept: Vec<Vec<f64>> = queue.iter().map(<[f64]>::to_vec).collect();
        prop_assert_eq!(&kept[..], &pushed[pushed.len() - queue.len()..]);
        for e in &kept {
            prop_assert!((dot(e, e).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_batch_is_rejected(n in 1usize..6, d in 2usize..5) {
        let mut rng = stream(n as u64, 1);
        let mut queue = MemoryQueue::new(2 * n - 1, d);
        let s = random_unit_rows(n, d, &mut rng);
        prop_assert!(queue.enqueue_batch(&s, &s).is_err());
    }

    #[test]
    fn loss_matches_naive_double_loop(seed in any::<u64>(), n in 1usize..=8, d in 2usize..=16, q in 0usize..=8, tau in 0.05f64..0.6) {
        let mut rng = stream(seed, 0);
        let s = random_unit_rows(n, d, &mut rng);
        let h = random_unit_rows(n, d, &mut rng);
        let queue = unit_rows_or_none(q, d, &mut rng);
        let entries: Vec<Vec<f64>> = queue.iter().flat_map(|t| (0..q).map(|i| t.row(i).to_vec())).collect();
        let fast = capt_loss_value(&s, &h, queue.as_ref(), tau).unwrap();
        prop_assert!((fast - naive_loss(&s, &h, &entries, tau)).abs() < 1e-9);
    }

    #[test]
    fn loss_is_rotation_invariant(seed in any::<u64>(), n in 1usize..=6, d in 2usize..=8, q in 0usize..=6) {
        let mut rng = stream(seed, 0);
        let s = random_unit_rows(n, d, &mut rng);
        let h = random_unit_rows(n, d, &mut rng);
        let queue = unit_rows_or_none(q, d, &mut rng);
        let r = random_orthogonal(d, &mut rng);
        let base = capt_loss_value(&s, &h, queue.as_ref(), 0.2).unwrap();
        let turned_queue = queue.as_ref().map(|t| rotate(t, &r));
        let turned = capt_loss_value(&rotate(&s, &r), &rotate(&h, &r), turned_queue.as_ref(), 0.2).unwrap();
        prop_assert!((base - turned).abs() < 1e-9);
    }

    #[test]
    fn sharper_positive_lowers_its_term(seed in any::<u64>(), n in 2usize..=6, d in 3usize..=8) {
        // Moving ŝ₀ onto s₀ raises the positive logit of row 0 and leaves
        // its negatives untouched, so its term cannot increase.
        let mut rng = stream(seed, 0);
        let s = random_unit_rows(n, d, &mut rng);
        let h = random_unit_rows(n, d, &mut rng);
        let mut aligned = h.clone();
        aligned.row_mut(0).copy_from_slice(s.row(0));
        let term0 = |hat: &Tensor| {
            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let hv = tape.constant(hat.clone());
            let t = capt_terms(&mut tape, sv, hv, None, 0.1).unwrap();
            tape.value(t).data()[0]
        };
        prop_assert!(term0(&aligned) <= term0(&h) + 1e-12);
    }

    #[test]
    fn queue_receives_no_gradient(seed in any::<u64>(), n in 1usize..=4, d in 2usize..=6, q in 1usize..=6) {
        let mut rng = stream(seed, 0);
        let queue = random_unit_rows(q, d, &mut rng);
        let mut tape = Tape::new();
        let sv = tape.param("s", random_unit_rows(n, d, &mut rng).into()).unwrap();
        let hv = tape.param("h", random_unit_rows(n, d, &mut rng).into()).unwrap();
        let loss = capt_loss(&mut tape, sv, hv, Some(&queue), 0.3).unwrap();
        let grads = tape.backward(loss).unwrap();
        let names: Vec<&str> = grads.iter().map(|(name, _)| name).collect();
        prop_assert_eq!(names, vec!["s", "h"]);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), r in 1usize..6, c in 1usize..12, scale in 0.1f64..50.0) {
        let mut rng = stream(seed, 0);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(r, c, scale, &mut rng));
        let p = tape.softmax_rows(x).unwrap();
        for i in 0..r {
            let row = tape.value(p).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(seed in any::<u64>(), r in 1usize..6, c in 1usize..12, scale in 1e-3f64..1e3) {
        let mut rng = stream(seed, 0);
        let mut tape = Tape::new();
        let x = tape.constant(random_matrix(r, c, scale, &mut rng));
        let y = tape.l2_normalize_rows(x).unwrap();
        for i in 0..r {
            let row = tape.value(y).row(i);
            prop_assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn aggregate_rows_are_unit(seed in any::<u64>(), n in 1usize..5) {
        let cfg = small_cfg();
        let mut rng = stream(seed, 0);
        let params = init_params(&cfg, &mut rng);
        let batch: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, &cfg)).collect();
        let s = eval_aggregate(&params, &cfg, &batch);
        for i in 0..n {
            prop_assert!((dot(s.row(i), s.row(i)).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_order_permutes_outputs(seed in any::<u64>(), n in 2usize..5) {
        let cfg = small_cfg();
        let mut rng = stream(seed, 0);
        let params = init_params(&cfg, &mut rng);
        let batch: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, &cfg)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<_> = order.iter().map(|&i| batch[i].clone()).collect();
        let a = eval_aggregate(&params, &cfg, &batch);
        let b = eval_aggregate(&params, &cfg, &permuted);
        for (k, &i) in order.iter().enumerate() {
            for (x, y) in b.row(k).iter().zip(a.row(i)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_and_neighbours_do_not_leak(seed in any::<u64>(), pad in 1usize..4) {
        let cfg = small_cfg();
        let mut rng = stream(seed, 0);
        let params = init_params(&cfg, &mut rng);
        let seq = random_sequence(&mut rng, &cfg);
        prop_assume!(seq.len() + pad <= cfg.max_len);
        let mut ids = seq.ids().to_vec();
        ids.extend(std::iter::repeat_n(PAD, pad));
        let padded = TokenSequence::from_parts(ids, seq.attention_len()).unwrap();
        let other = random_sequence(&mut rng, &cfg);
        let alone = eval_aggregate(&params, &cfg, std::slice::from_ref(&seq));
        let packed = eval_aggregate(&params, &cfg, &[other, padded]);
        for (x, y) in alone.row(0).iter().zip(packed.row(1)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mlm_loss_ignores_label_order(seed in any::<u64>(), n in 1usize..4) {
        let cfg = small_cfg();
        let mut rng = stream(seed, 0);
        let params = init_params(&cfg, &mut rng);
        let batch: Vec<_> = (0..n).map(|_| random_sequence(&mut rng, &cfg)).collect();
        let mut labels: Vec<MlmLabel> = batch
            .iter()
            .enumerate()
            .flat_map(|(b, seq)| (1..seq.attention_len() - 1).map(move |p| (b, p, seq.ids()[p])))
            .map(|(batch, position, id)| MlmLabel { batch, position, id })
            .collect();
        let loss = |labels: &[MlmLabel]| {
            let mut tape = Tape::new();
            let bound = params.attach(&mut tape).unwrap();
            let enc = encode::<StreamRng>(&mut tape, &bound, &cfg, &batch, None).unwrap();
            let l = mlm_loss(&mut tape, &bound, &enc, labels).unwrap();
            tape.value(l).item()
        };
        let before = loss(&labels);
        labels.shuffle(&mut rng);
        prop_assert!((before - loss(&labels)).abs() < 1e-12);
    }
}

#[test]
fn mlm_loss_is_log_vocab_for_uniform_logits() {
    let cfg = small_cfg();
    let mut rng = stream(3, 0);
    let mut params = init_params(&cfg, &mut rng);
    params.insert(
        TOKEN_EMBEDDING,
        Tensor::zeros(&[cfg.vocab_size, cfg.hidden]),
    );
    params.insert(MLM_BIAS, Tensor::zeros(&[cfg.vocab_size]));
    let batch = vec![random_sequence(&mut rng, &cfg)];
    let labels = [MlmLabel {
        batch: 0,
        position: 1,
        id: batch[0].ids()[1],
    }];
    let mut tape = Tape::new();
    let bound = params.attach(&mut tape).unwrap();
    let enc = encode::<StreamRng>(&mut tape, &bound, &cfg, &batch, None).unwrap();
    let l = mlm_loss(&mut tape, &bound, &enc, &labels).unwrap();
    assert!((tape.value(l).item() - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}
