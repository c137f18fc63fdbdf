//! Pre-training loop: sample → corrupt → encode both views → aggregate →
//! contrastive + MLM loss → backward → Adam → enqueue.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;

use crate::checkpoint::{adam_config, Checkpoint};
use crate::config::{RunConfig, TemperatureMode};
use crate::contrastive::{capt_loss, mean_pair_cosine, MemoryQueue, TemperatureSchedule};
use crate::corpus::{BatchSampler, Corpus, Vocabulary};
use crate::corruption::corrupt;
use crate::encoder::{aggregate, encode, init_params};
use crate::error::{Error, Result};
use crate::mlm::{batch_labels, mlm_loss};
use crate::optimizer::{AdamState, LrSchedule};
use crate::params::Params;
use crate::rng::{child, stream, RngState, StreamRng};
use crate::tape::Tape;

pub const METRICS_HEADER: &str =
    "step,lr,tau,mlm_loss,capt_loss,total_loss,mean_pair_cosine,queue_fill";
pub const METRICS_FILE: &str = "metrics.csv";

const SAMPLER_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// One line of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    /// Absent under shuffle noise, which produces no MLM labels.
    pub mlm_loss: Option<f64>,
    /// Contrastive loss as it enters the total, before `capt_weight`.
    pub capt_loss: f64,
    pub total_loss: f64,
    pub mean_pair_cosine: f64,
    pub queue_fill: usize,
}

impl MetricsRow {
    /// Floats use the shortest round-tripping representation.
    pub fn to_csv(&self) -> String {
        let mlm = self.mlm_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{},{:?},{:?},{:?},{}",
            self.step,
            self.lr,
            self.tau,
            mlm,
            self.capt_loss,
            self.total_loss,
            self.mean_pair_cosine,
            self.queue_fill
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Config(format!(
                "metrics line has {} fields",
                f.len()
            )));
        }
        let bad = |_| Error::Config(format!("malformed metrics line {line:?}"));
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Config(format!("malformed metrics line {line:?}")))?,
            lr: f[1].parse().map_err(bad)?,
            tau: f[2].parse().map_err(bad)?,
            mlm_loss: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(bad)?)
            },
            capt_loss: f[4].parse().map_err(bad)?,
            total_loss: f[5].parse().map_err(bad)?,
            mean_pair_cosine: f[6].parse().map_err(bad)?,
            queue_fill: f[7]
                .parse()
                .map_err(|_| Error::Config(format!("malformed metrics line {line:?}")))?,
        })
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config(
            "metrics file lacks the expected header".into(),
        ));
    }
    lines.map(MetricsRow::parse_csv).collect()
}

pub fn temperature_schedule(cfg: &RunConfig) -> TemperatureSchedule {
    match cfg.model.temperature_mode {
        TemperatureMode::Adaptive => TemperatureSchedule::Adaptive {
            total_steps: cfg.model.total_steps,
        },
        TemperatureMode::Fixed(t) => TemperatureSchedule::Fixed(t),
    }
}

pub fn lr_schedule(cfg: &RunConfig) -> LrSchedule {
    LrSchedule {
        peak: cfg.model.peak_lr,
        warmup_steps: cfg.model.warmup_steps,
        total_steps: cfg.model.total_steps,
    }
}

/// Mutable training state; [`Trainer::checkpoint`] captures all of it.
pub struct Trainer {
    config: RunConfig,
    corpus: Corpus,
    vocab: Vocabulary,
    step: usize,
    params: Params,
    adam: AdamState,
    queue: MemoryQueue,
    sampler: BatchSampler,
    rng: StreamRng,
}

impl Trainer {
    pub fn new(config: RunConfig, corpus: Corpus, vocab: Vocabulary) -> Result<Self> {
        config.model.validate()?;
        check_vocab(&config, &vocab)?;
        let m = &config.model;
        let params = init_params(m, &mut stream(m.seed, INIT_STREAM));
        Ok(Self {
            adam: AdamState::new(adam_config(m)),
            queue: MemoryQueue::new(m.queue_capacity, m.agg_out),
            sampler: BatchSampler::new(m.batch_size, m.max_len, stream(m.seed, SAMPLER_STREAM)),
            rng: stream(m.seed, TRAIN_STREAM),
            step: 0,
            params,
            config,
            corpus,
            vocab,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, corpus: Corpus) -> Result<Self> {
        check_vocab(&ckpt.config, &ckpt.vocab)?;
        let m = &ckpt.config.model;
        let mut sampler = BatchSampler::new(m.batch_size, m.max_len, stream(0, 0));
        sampler.set_rng_state(&ckpt.sampler_rng);
        Ok(Self {
            config: ckpt.config,
            corpus,
            vocab: ckpt.vocab,
            step: ckpt.step,
            params: ckpt.params,
            adam: ckpt.adam,
            queue: ckpt.queue,
            sampler,
            rng: ckpt.train_rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            queue: self.queue.clone(),
            sampler_rng: self.sampler.rng_state(),
            train_rng: RngState::capture(&self.rng),
            vocab: self.vocab.clone(),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn queue(&self) -> &MemoryQueue {
        &self.queue
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Runs step `t = self.step() + 1`. On a non-finite loss nothing is
    /// updated and a numeric error is returned.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let cfg = &self.config;
        let m = &cfg.model;
        let t = self.step + 1;
        if t > m.total_steps {
            return Err(Error::Contract(format!(
                "step {t} beyond total_steps {}",
                m.total_steps
            )));
        }
        let tau = temperature_schedule(cfg).temperature(t)?;
        let lr = lr_schedule(cfg).lr(t);

        let batch = self.sampler.next_batch(&self.corpus, &self.vocab);
        let noise = m.noise();
        let pairs = batch
            .iter()
            .map(|seq| corrupt(seq, noise, self.vocab.len(), &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let corrupted: Vec<_> = pairs.iter().map(|p| p.corrupted.clone()).collect();
        let mut drop_x = child(&mut self.rng);
        let mut drop_xh = child(&mut self.rng);

        let mut tape = Tape::new();
        let bound = self.params.attach(&mut tape)?;
        let enc_x = encode(&mut tape, &bound, m, &batch, Some(&mut drop_x))?;
        let enc_xh = encode(&mut tape, &bound, m, &corrupted, Some(&mut drop_xh))?;
        let s = aggregate(&mut tape, &bound, m, &enc_x)?;
        let s_hat = aggregate(&mut tape, &bound, m, &enc_xh)?;

        let snapshot = self.queue.snapshot();
        let mut capt = capt_loss(&mut tape, s, s_hat, snapshot.as_ref(), tau)?;
        if cfg.capt_mean {
            capt = tape.scale(capt, 1.0 / (2 * batch.len()) as f64);
        }
        let labels = batch_labels(&pairs);
        let mlm = if labels.is_empty() {
            None
        } else {
            Some(mlm_loss(&mut tape, &bound, &enc_xh, &labels)?)
        };
        let total = match (mlm, cfg.capt_weight) {
            (Some(mlm), 0.0) => mlm,
            (Some(mlm), w) => {
                let weighted = tape.scale(capt, w);
                tape.add(mlm, weighted)?
            }
            (None, 0.0) => {
                return Err(Error::Config(
                    "capt_weight 0 with shuffle noise leaves no objective".into(),
                ))
            }
            (None, w) => tape.scale(capt, w),
        };

        let total_value = tape.value(total).item();
        let capt_value = tape.value(capt).item();
        let mlm_value = mlm.map(|v| tape.value(v).item());
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total_value} at step {t}"
            )));
        }
        let s_val = tape.value(s).clone();
        let s_hat_val = tape.value(s_hat).clone();
        let grads = tape.backward(total)?;
        drop(tape);

        self.adam.step(&mut self.params, &grads, lr)?;
        self.queue.enqueue_batch(&s_val, &s_hat_val)?;
        self.step = t;

        Ok(MetricsRow {
            step: t,
            lr,
            tau,
            mlm_loss: mlm_value,
            capt_loss: capt_value,
            total_loss: total_value,
            mean_pair_cosine: mean_pair_cosine(&s_val, &s_hat_val),
            queue_fill: self.queue.len(),
        })
    }
}

fn check_vocab(cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "vocabulary has {} tokens, model holds {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub steps_run: usize,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Keeps the header and the first `rows` data lines of a metrics file.
fn truncate_metrics(path: &Path, rows: usize) -> Result<()> {
    let file = File::open(path)?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .take(rows + 1)
        .collect::<std::io::Result<_>>()?;
    if lines.len() != rows + 1 || lines[0] != METRICS_HEADER {
        return Err(Error::Config(format!(
            "{} does not hold the {rows} rows preceding the checkpoint",
            path.display()
        )));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

/// Trains to `total_steps`, writing one metrics row per step and a
/// checkpoint every `checkpoint_interval` steps and at the end. With
/// `resume`, training continues from that checkpoint and the metrics file in
/// `output_dir` is cut back to the checkpoint's step first.
pub fn run_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainSummary> {
    cfg.model.validate()?;
    let corpus = Corpus::load(&cfg.corpus).map_err(|e| match e {
        Error::Io(io) => {
            Error::Config(format!("cannot read corpus {}: {io}", cfg.corpus.display()))
        }
        other => other,
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config.model != cfg.model {
                return Err(Error::Config(
                    "checkpoint was trained with a different model config".into(),
                ));
            }
            let mut ckpt = ckpt;
            ckpt.config = cfg.clone();
            let step = ckpt.step;
            let trainer = Trainer::from_checkpoint(ckpt, corpus)?;
            if metrics_path.exists() {
                truncate_metrics(&metrics_path, step)?;
            } else if step == 0 {
                fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            } else {
                return Err(Error::Config(format!(
                    "{} is missing",
                    metrics_path.display()
                )));
            }
            trainer
        }
        None => {
            let vocab =
                Vocabulary::build_from_text(&corpus.lines().join("\n"), cfg.model.vocab_size)?;
            let trainer = Trainer::new(cfg.clone(), corpus, vocab)?;
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            trainer
        }
    };

    let start = trainer.step();
    let total = cfg.model.total_steps;
    let mut last = checkpoint_path(&cfg.output_dir, start);
    if start == total {
        trainer.checkpoint().save(&last)?;
    }
    let mut out = OpenOptions::new().append(true).open(&metrics_path)?;
    while trainer.step() < total {
        let row = trainer.train_step()?;
        writeln!(out, "{}", row.to_csv())?;
        out.flush()?;
        if row.step % 100 == 0 || row.step == total {
            info!(
                "step {} total {:.4} mlm {:?} capt {:.4} cos {:.4}",
                row.step, row.total_loss, row.mlm_loss, row.capt_loss, row.mean_pair_cosine
            );
        }
        let interval = cfg.checkpoint_interval;
        if (interval > 0 && row.step % interval == 0) || row.step == total {
            last = checkpoint_path(&cfg.output_dir, row.step);
            trainer.checkpoint().save(&last)?;
        }
    }
    Ok(PretrainSummary {
        steps_run: total - start,
        final_checkpoint: last,
        metrics: metrics_path,
    })
}
