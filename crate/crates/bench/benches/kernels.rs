use std::hint::black_box;

use capt_core::contrastive::capt_loss;
use capt_core::diagnostics::{random_matrix, random_unit_rows};
use capt_core::probe::ProbeTask;
use capt_core::rng::stream;
use capt_core::{Corpus, EncoderConfig, RunConfig, Segment, Tape, Trainer, Vocabulary};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let mut rng = stream(1, 0);
        let a = random_matrix(n, n, 1.0, &mut rng);
        let b = random_matrix(n, n, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let av = tape.constant(a.clone());
                let bv = tape.constant(b.clone());
                black_box(tape.matmul(av, bv).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (seqs, len, d, heads) = (32, 32, 64, 4);
    let mut rng = stream(2, 0);
    let x = [0, 1, 2].map(|_| random_matrix(seqs * len, d, 1.0, &mut rng));
    let segments: Vec<Segment> = (0..seqs)
        .map(|i| Segment {
            start: i * len,
            len,
        })
        .collect();
    c.bench_function("attention forward+backward 32x32x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let [q, k, v] =
                [0, 1, 2].map(|i| tape.param(&format!("x{i}"), x[i].clone().into()).unwrap());
            let out = tape.attention(q, k, v, &segments, heads).unwrap();
            let loss = tape.sum(out);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group("capt_loss forward+backward");
    for (n, q) in [(32, 0), (32, 1024)] {
        let mut rng = stream(3, 0);
        let s = random_unit_rows(n, 256, &mut rng);
        let h = random_unit_rows(n, 256, &mut rng);
        let queue = (q > 0).then(|| random_unit_rows(q, 256, &mut rng));
        group.bench_with_input(BenchmarkId::new("queue", q), &q, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let sv = tape.param("s", s.clone().into()).unwrap();
                let hv = tape.param("h", h.clone().into()).unwrap();
                let loss = capt_loss(&mut tape, sv, hv, queue.as_ref(), 0.1).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = EncoderConfig {
        total_steps: 1_000_000,
        warmup_steps: 10,
        ..EncoderConfig::tiny()
    };
    let lines = ProbeTask::default().corpus_lines(2000, 1);
    let vocab = Vocabulary::build_from_text(&lines.join("\n"), model.vocab_size).unwrap();
    let corpus = Corpus::from_lines(lines).unwrap();
    let mut trainer = Trainer::new(RunConfig::with_model(model), corpus, vocab).unwrap();
    let mut group = c.benchmark_group("train step");
    group.sample_size(20);
    group.bench_function("tiny preset", |bench| {
        bench.iter(|| black_box(trainer.train_step().unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, attention, contrastive, train_step);
criterion_main!(benches);
