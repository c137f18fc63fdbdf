//! Synthetic two-class probe task and a fine-tuning harness that compares how
//! fast different checkpoints reach a validation accuracy threshold.
//!
//! Sentences come from a small template grammar. Every slot of a template
//! belongs to a category; with probability `rho` the slot is filled from the
//! sentence class's topic words for that category, otherwise from the shared
//! filler words. The two classes' topic vocabularies are disjoint.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::checkpoint::{adam_config, Checkpoint};
use crate::config::{EncoderConfig, ProbeOptions};
use crate::corpus::{tokenize, TokenSequence, Vocabulary};
use crate::encoder::{encode, MLM_BIAS};
use crate::error::{Error, Result};
use crate::optimizer::{AdamState, LrSchedule};
use crate::params::{Bound, Params};
use crate::rng::{child, stream, StreamRng};
use crate::tape::{Reduction, Tape, Var};

const CATEGORIES: [&str; 8] = [
    "agent", "action", "object", "place", "time", "manner", "quality", "tool",
];

const TEMPLATES: [&str; 3] = [
    "the {quality} {agent} {action} the {object} in the {place} {time} with a {tool} {manner}",
    "{time} a {agent} {manner} {action} some {quality} {object} at the {place} using the {tool}",
    "in the {place} the {agent} with a {tool} {action} every {object} {manner} {time} and looked {quality}",
];

const CLASS_TAGS: [char; 2] = ['a', 'b'];

/// Generator parameters of the probe corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTask {
    /// Probability that a slot takes a topic word of the sentence's class.
    pub rho: f64,
    /// Topic words per category and class.
    pub topic_words: usize,
    /// Shared filler words per category.
    pub filler_words: usize,
}

impl Default for ProbeTask {
    fn default() -> Self {
        Self {
            rho: 0.35,
            topic_words: 12,
            filler_words: 3,
        }
    }
}

impl ProbeTask {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            ..Self::default()
        }
    }

    pub fn from_options(opts: &ProbeOptions) -> Self {
        Self {
            rho: opts.probe_rho,
            topic_words: opts.probe_topic_words,
            filler_words: opts.probe_filler_words,
        }
    }

    fn topic_word(cat: &str, class: usize, k: usize) -> String {
        format!("{cat}_{}{k}", CLASS_TAGS[class])
    }

    fn filler_word(cat: &str, k: usize) -> String {
        format!("{cat}_x{k}")
    }

    /// Topic words of `class`, across all categories.
    pub fn topic_vocabulary(&self, class: usize) -> HashSet<String> {
        CATEGORIES
            .iter()
            .flat_map(|c| (0..self.topic_words).map(move |k| Self::topic_word(c, class, k)))
            .collect()
    }

    /// One sentence of `class`.
    pub fn sentence<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> String {
        let template = TEMPLATES.choose(rng).expect("templates");
        let mut out = String::new();
        for (i, piece) in template.split(' ').enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                Some(cat) => {
                    let word = if rng.random::<f64>() < self.rho {
                        Self::topic_word(cat, class, rng.random_range(0..self.topic_words))
                    } else {
                        Self::filler_word(cat, rng.random_range(0..self.filler_words))
                    };
                    out.push_str(&word);
                }
                None => out.push_str(piece),
            }
        }
        out
    }

    /// Unlabeled text with the classes interleaved, for pre-training.
    pub fn corpus_lines(&self, lines: usize, seed: u64) -> Vec<String> {
        let mut rng = stream(seed, 0);
        (0..lines).map(|i| self.sentence(i % 2, &mut rng)).collect()
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) || self.topic_words == 0 || self.filler_words == 0 {
            return Err(Error::Config(
                "probe task needs rho in [0, 1] and nonempty word pools".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeData {
    pub train: Vec<LabeledSentence>,
    pub val: Vec<LabeledSentence>,
}

/// Balanced, duplicate-free train and validation sets with no sentence in
/// both.
pub fn generate_probe_data(
    task: &ProbeTask,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<ProbeData> {
    task.validate()?;
    if !n_train.is_multiple_of(2) || !n_val.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "split sizes must be even, got {n_train} and {n_val}"
        )));
    }
    let mut rng = stream(seed, 0);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, rng: &mut StreamRng| -> Result<Vec<LabeledSentence>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let mut attempts = 0;
            let text = loop {
                let s = task.sentence(label, rng);
                if seen.insert(s.clone()) {
                    break s;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "probe task cannot produce enough distinct sentences".into(),
                    ));
                }
            };
            out.push(LabeledSentence { text, label });
        }
        out.shuffle(rng);
        Ok(out)
    };
    let train = draw(n_train, &mut rng)?;
    let val = draw(n_val, &mut rng)?;
    Ok(ProbeData { train, val })
}

/// Writes `<stem>.txt` and the parallel `<stem>.labels`.
pub fn write_split(dir: impl AsRef<Path>, stem: &str, data: &[LabeledSentence]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut text = String::new();
    let mut labels = String::new();
    for s in data {
        let _ = writeln!(text, "{}", s.text);
        let _ = writeln!(labels, "{}", s.label);
    }
    fs::write(dir.join(format!("{stem}.txt")), text)?;
    fs::write(dir.join(format!("{stem}.labels")), labels)?;
    Ok(())
}

pub fn write_probe_data(dir: impl AsRef<Path>, data: &ProbeData) -> Result<()> {
    write_split(&dir, "train", &data.train)?;
    write_split(&dir, "val", &data.val)
}

pub fn read_split(dir: impl AsRef<Path>, stem: &str) -> Result<Vec<LabeledSentence>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(format!("{stem}.txt")))?;
    let labels = fs::read_to_string(dir.join(format!("{stem}.labels")))?;
    let texts: Vec<&str> = text.lines().collect();
    let labels: Vec<&str> = labels.lines().collect();
    if texts.len() != labels.len() {
        return Err(Error::Config(format!(
            "{stem}: {} sentences but {} labels",
            texts.len(),
            labels.len()
        )));
    }
    texts
        .into_iter()
        .zip(labels)
        .map(|(t, l)| match l.trim() {
            "0" => Ok(LabeledSentence {
                text: t.to_string(),
                label: 0,
            }),
            "1" => Ok(LabeledSentence {
                text: t.to_string(),
                label: 1,
            }),
            other => Err(Error::Config(format!(
                "{stem}: label {other:?} is not 0 or 1"
            ))),
        })
        .collect()
}

pub fn read_probe_data(dir: impl AsRef<Path>) -> Result<ProbeData> {
    Ok(ProbeData {
        train: read_split(&dir, "train")?,
        val: read_split(&dir, "val")?,
    })
}

/// Each training word votes for the class it occurs in more often; a
/// validation sentence takes the majority of its words' votes (ties and
/// voteless sentences go to class 0).
pub fn bag_of_words_accuracy(data: &ProbeData) -> f64 {
    let mut counts: HashMap<String, [usize; 2]> = HashMap::new();
    for s in &data.train {
        for w in tokenize(&s.text) {
            counts.entry(w).or_default()[s.label] += 1;
        }
    }
    let correct = data
        .val
        .iter()
        .filter(|s| {
            let mut votes = [0usize; 2];
            for w in tokenize(&s.text) {
                if let Some(&[c0, c1]) = counts.get(&w) {
                    if c0 > c1 {
                        votes[0] += 1;
                    } else if c1 > c0 {
                        votes[1] += 1;
                    }
                }
            }
            let predicted = usize::from(votes[1] > votes[0]);
            predicted == s.label
        })
        .count();
    correct as f64 / data.val.len() as f64
}

/// Encodes sentences, failing on any word the vocabulary lacks.
pub fn encode_split(
    vocab: &Vocabulary,
    data: &[LabeledSentence],
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    data.iter()
        .map(|s| {
            if let Some(w) = tokenize(&s.text).find(|w| vocab.id(w).is_none()) {
                return Err(Error::VocabMismatch(format!(
                    "probe word {w:?} is not in the checkpoint vocabulary"
                )));
            }
            Ok(vocab.encode(&s.text, max_len))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Validation accuracy before training and after every `eval_interval`
/// steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub initial: f64,
    pub points: Vec<(usize, f64)>,
}

impl Curve {
    pub fn first_reaching(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.1 >= threshold).map(|p| p.0)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.points.last().map_or(self.initial, |p| p.1)
    }
}

fn is_body(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("layers.")
}

fn classify(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    batch: &[TokenSequence],
    rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let enc = encode(tape, bound, cfg, batch, rng)?;
    let cls = enc.cls(tape)?;
    let w1 = bound.get("head.inner.weight")?;
    let b1 = bound.get("head.inner.bias")?;
    let w2 = bound.get("head.outer.weight")?;
    let b2 = bound.get("head.outer.bias")?;
    let h = tape.matmul(cls, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_bias(out, b2)
}

const EVAL_CHUNK: usize = 256;

fn accuracy(
    params: &Params,
    cfg: &EncoderConfig,
    seqs: &[TokenSequence],
    labels: &[usize],
) -> Result<f64> {
    let mut correct = 0;
    for (chunk, lab) in seqs.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape)?;
        let logits = classify(&mut tape, &bound, cfg, chunk, None)?;
        let v = tape.value(logits);
        correct += (0..chunk.len())
            .filter(|&r| usize::from(v.row(r)[1] > v.row(r)[0]) == lab[r])
            .count();
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// Fine-tunes the encoder body of `ckpt` plus a fresh `d → d → 2` head on
/// the `[CLS]` state. The aggregation and MLM parameters are not used.
pub fn finetune(ckpt: &Checkpoint, data: &ProbeData, settings: &FinetuneSettings) -> Result<Curve> {
    let cfg = &ckpt.config.model;
    if settings.eval_interval == 0 || settings.batch_size == 0 {
        return Err(Error::Config(
            "eval_interval and batch_size must be positive".into(),
        ));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("probe splits must be nonempty".into()));
    }
    let train = encode_split(&ckpt.vocab, &data.train, cfg.max_len)?;
    let val = encode_split(&ckpt.vocab, &data.val, cfg.max_len)?;
    let train_labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    let val_labels: Vec<usize> = data.val.iter().map(|s| s.label).collect();

    let mut params = Params::new();
    for (name, t) in ckpt.params.iter().filter(|(n, _)| is_body(n)) {
        params.insert(name, t.clone());
    }
    let d = cfg.hidden;
    let mut init_rng = stream(settings.seed, 3);
    params.init_normal("head.inner.weight", d, d, &mut init_rng);
    params.init_const("head.inner.bias", d, 0.0);
    params.init_normal("head.outer.weight", d, 2, &mut init_rng);
    params.init_const("head.outer.bias", 2, 0.0);
    debug_assert!(!params.contains(MLM_BIAS));

    let schedule = LrSchedule {
        peak: settings.lr,
        warmup_steps: (settings.steps / 10).max(1),
        total_steps: settings.steps,
    };
    let mut adam = AdamState::new(adam_config(cfg));
    let mut rng = stream(settings.seed, 4);
    let mut curve = Curve {
        initial: accuracy(&params, cfg, &val, &val_labels)?,
        points: Vec::new(),
    };
    for t in 1..=settings.steps {
        let idx: Vec<usize> = (0..settings.batch_size)
            .map(|_| rng.random_range(0..train.len()))
            .collect();
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| train[i].clone()).collect();
        let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let mut dropout_rng = child(&mut rng);
        let mut tape = Tape::new();
        let bound = params.attach(&mut tape)?;
        let logits = classify(&mut tape, &bound, cfg, &batch, Some(&mut dropout_rng))?;
        let loss = tape.cross_entropy(logits, &targets, None, Reduction::Mean)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fine-tuning loss at step {t}"
            )));
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        adam.step(&mut params, &grads, schedule.lr(t))?;
        if t % settings.eval_interval == 0 {
            curve
                .points
                .push((t, accuracy(&params, cfg, &val, &val_labels)?));
        }
    }
    Ok(curve)
}

/// Fine-tunes `ckpt` once per configured seed.
pub fn finetune_all(
    ckpt: &Checkpoint,
    data: &ProbeData,
    opts: &ProbeOptions,
) -> Result<Vec<Curve>> {
    let model = &ckpt.config.model;
    opts.finetune_seeds
        .iter()
        .map(|&seed| {
            let settings = FinetuneSettings {
                steps: opts.finetune_steps,
                lr: opts.finetune_lr(model),
                eval_interval: opts.eval_interval,
                batch_size: model.batch_size,
                seed,
            };
            log::info!("fine-tuning with seed {seed}");
            finetune(ckpt, data, &settings)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
    Tie,
}

/// Side-by-side summary of two groups of fine-tuning curves (one per seed).
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub threshold: f64,
    pub first_a: Vec<Option<usize>>,
    pub first_b: Vec<Option<usize>>,
    /// Median over seeds of the first step reaching the threshold; `None`
    /// means the median run never reached it.
    pub median_a: Option<f64>,
    pub median_b: Option<f64>,
    /// `(step, median accuracy of A − median accuracy of B)`.
    pub deltas: Vec<(usize, f64)>,
    pub winner: Winner,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn median_first(firsts: &[Option<usize>]) -> Option<f64> {
    if firsts.is_empty() {
        return None;
    }
    let m = median(
        firsts
            .iter()
            .map(|f| f.map_or(f64::INFINITY, |s| s as f64))
            .collect(),
    );
    m.is_finite().then_some(m)
}

pub fn median_final_accuracy(curves: &[Curve]) -> f64 {
    median(curves.iter().map(Curve::final_accuracy).collect())
}

/// Compares two groups of curves recorded under identical settings. The
/// group whose median run reaches `threshold` earlier wins.
pub fn compare_runs(a: &[Curve], b: &[Curve], threshold: f64) -> Comparison {
    let first_a: Vec<_> = a.iter().map(|c| c.first_reaching(threshold)).collect();
    let first_b: Vec<_> = b.iter().map(|c| c.first_reaching(threshold)).collect();
    let median_a = median_first(&first_a);
    let median_b = median_first(&first_b);
    let winner = match (median_a, median_b) {
        (Some(x), Some(y)) if x < y => Winner::A,
        (Some(x), Some(y)) if y < x => Winner::B,
        (Some(_), None) => Winner::A,
        (None, Some(_)) => Winner::B,
        _ => Winner::Tie,
    };
    let steps: Vec<usize> = a
        .first()
        .map(|c| c.points.iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let deltas = steps
        .iter()
        .enumerate()
        .filter(|(i, _)| a.iter().chain(b).all(|c| c.points.len() > *i))
        .map(|(i, &step)| {
            let ma = median(a.iter().map(|c| c.points[i].1).collect());
            let mb = median(b.iter().map(|c| c.points[i].1).collect());
            (step, ma - mb)
        })
        .collect();
    Comparison {
        threshold,
        first_a,
        first_b,
        median_a,
        median_b,
        deltas,
        winner,
    }
}

impl Comparison {
    /// Plain-text report.
    pub fn table(&self, name_a: &str, name_b: &str) -> String {
        let fmt = |f: &Option<usize>| f.map_or("not reached".to_string(), |s| s.to_string());
        let fmt_m = |m: Option<f64>| m.map_or("not reached".to_string(), |s| format!("{s}"));
        let mut out = String::new();
        let _ = writeln!(out, "first step reaching accuracy {:.2}", self.threshold);
        let _ = writeln!(out, "{:>6}  {:>14}  {:>14}", "seed", name_a, name_b);
        for (i, (fa, fb)) in self.first_a.iter().zip(&self.first_b).enumerate() {
            let _ = writeln!(out, "{:>6}  {:>14}  {:>14}", i + 1, fmt(fa), fmt(fb));
        }
        let _ = writeln!(
            out,
            "{:>6}  {:>14}  {:>14}",
            "median",
            fmt_m(self.median_a),
            fmt_m(self.median_b)
        );
        let winner = match self.winner {
            Winner::A => name_a,
            Winner::B => name_b,
            Winner::Tie => "tie",
        };
        let _ = writeln!(out, "winner: {winner}");
        let _ = writeln!(out, "\n{:>6}  {:>10}", "step", "delta");
        for (step, d) in &self.deltas {
            let _ = writeln!(out, "{step:>6}  {d:>+10.4}");
        }
        out
    }
}

/// CSV of every curve: `group,seed,step,accuracy`, step 0 being the initial
/// evaluation.
pub fn curves_csv(groups: &[(&str, &[Curve])]) -> String {
    let mut out = String::from("group,seed,step,accuracy\n");
    for (name, curves) in groups {
        for (seed, c) in curves.iter().enumerate() {
            let _ = writeln!(out, "{name},{},0,{:?}", seed + 1, c.initial);
            for (step, acc) in &c.points {
                let _ = writeln!(out, "{name},{},{step},{acc:?}", seed + 1);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(usize, f64)]) -> Curve {
        Curve {
            initial: 0.5,
            points: points.to_vec(),
        }
    }

    #[test]
    fn balanced_and_disjoint() {
        let data = generate_probe_data(&ProbeTask::default(), 200, 60, 3).unwrap();
        assert_eq!(data.train.iter().filter(|s| s.label == 0).count(), 100);
        assert_eq!(data.val.iter().filter(|s| s.label == 1).count(), 30);
        let train: HashSet<_> = data.train.iter().map(|s| &s.text).collect();
        assert!(data.val.iter().all(|s| !train.contains(&s.text)));
        assert_eq!(
            data,
            generate_probe_data(&ProbeTask::default(), 200, 60, 3).unwrap()
        );
    }

    #[test]
    fn odd_sizes_rejected() {
        assert!(generate_probe_data(&ProbeTask::default(), 3, 2, 0).is_err());
    }

    #[test]
    fn pure_topics_are_bag_of_words_separable() {
        let data = generate_probe_data(&ProbeTask::with_rho(1.0), 400, 200, 5).unwrap();
        assert_eq!(bag_of_words_accuracy(&data), 1.0);
    }

    #[test]
    fn identical_curves_tie() {
        let c = vec![curve(&[(10, 0.6), (20, 0.95)])];
        let cmp = compare_runs(&c, &c, 0.9);
        assert_eq!(cmp.winner, Winner::Tie);
        assert!(cmp.deltas.iter().all(|d| d.1 == 0.0));
    }

    #[test]
    fn unreached_threshold_loses() {
        let a = vec![curve(&[(10, 0.6), (20, 0.7)])];
        let b = vec![curve(&[(10, 0.6), (20, 0.92)])];
        let cmp = compare_runs(&a, &b, 0.9);
        assert_eq!(cmp.first_a, vec![None]);
        assert_eq!(cmp.median_b, Some(20.0));
        assert_eq!(cmp.winner, Winner::B);
        assert!(cmp.table("a", "b").contains("not reached"));
    }

    #[test]
    fn median_treats_unreached_as_infinite() {
        let a = vec![
            curve(&[(10, 0.95)]),
            curve(&[(10, 0.5), (20, 0.5)]),
            curve(&[(10, 0.5), (20, 0.91)]),
        ];
        assert_eq!(compare_runs(&a, &a, 0.9).median_a, Some(20.0));
    }
}
