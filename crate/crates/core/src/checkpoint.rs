//! Binary checkpoint: magic, config and named parameters, followed by the
//! state needed to resume (step, optimizer moments, memory queue, RNG
//! positions, vocabulary). Floats are stored as raw little-endian bits so a
//! restored run continues bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::RunConfig;
use crate::contrastive::MemoryQueue;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::optimizer::{AdamConfig, AdamState, Moments};
use crate::params::Params;
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"CAPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed training steps.
    pub step: usize,
    pub params: Params,
    pub adam: AdamState,
    pub queue: MemoryQueue,
    pub sampler_rng: RngState,
    pub train_rng: RngState,
    pub vocab: Vocabulary,
}

pub fn adam_config(cfg: &crate::config::EncoderConfig) -> AdamConfig {
    AdamConfig {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for x in xs {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    fn rng(&mut self, r: &RngState) {
        self.0.extend_from_slice(&r.seed);
        self.u64(r.stream);
        self.0.extend_from_slice(&r.word_pos.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
    fn rng(&mut self) -> Result<RngState> {
        let seed = self.take(32)?.try_into().expect("32 bytes");
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes"));
        Ok(RngState {
            seed,
            stream,
            word_pos,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.str(&self.config.to_config_text());

        w.usize(self.params.len());
        for (name, t) in self.params.iter() {
            w.str(name);
            w.usize(t.shape().len());
            t.shape().iter().for_each(|&d| w.usize(d));
            w.f64s(t.data());
        }

        w.usize(self.step);

        w.u64(self.adam.step);
        w.usize(self.adam.moments.len());
        for (name, mo) in &self.adam.moments {
            w.str(name);
            w.f64s(&mo.m);
            w.f64s(&mo.v);
        }

        w.usize(self.queue.capacity());
        w.usize(self.queue.dim());
        w.usize(self.queue.len());
        for e in self.queue.iter() {
            w.f64s(e);
        }

        w.rng(&self.sampler_rng);
        w.rng(&self.train_rng);
        w.str(&self.vocab.to_file_string());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let config = RunConfig::parse(r.str()?)?;

        let mut params = Params::new();
        for _ in 0..r.usize()? {
            let name = r.str()?.to_string();
            let ndim = r.usize()?;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        let step = r.usize()?;

        let mut adam = AdamState::new(adam_config(&config.model));
        adam.step = r.u64()?;
        let mut moments = IndexMap::new();
        for _ in 0..r.usize()? {
            let name = r.str()?.to_string();
            let (m, v) = (r.f64s()?, r.f64s()?);
            let expected = params.get(&name).map(Tensor::numel);
            if expected != Some(m.len()) || m.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moments for {name} do not match"
                )));
            }
            moments.insert(name, Moments { m, v });
        }
        adam.moments = moments;

        let (capacity, dim, count) = (r.usize()?, r.usize()?, r.usize()?);
        let entries = (0..count).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        let queue = MemoryQueue::from_entries(capacity, dim, entries)?;

        let sampler_rng = r.rng()?;
        let train_rng = r.rng()?;
        let vocab_text = r.str()?;
        let vocab = Vocabulary::from_tokens(vocab_text.lines().map(str::to_string).collect())
            .map_err(|e| Error::Checkpoint(format!("vocabulary: {e}")))?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            step,
            params,
            adam,
            queue,
            sampler_rng,
            train_rng,
            vocab,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}
