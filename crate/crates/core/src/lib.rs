//! Contrastive pre-training of a transformer encoder: autodiff tape, corpus
//! pipeline, corruption, encoder, contrastive and MLM objectives, optimizer,
//! training loop and a synthetic fine-tuning probe.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod corruption;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod mlm;
pub mod optimizer;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{EncoderConfig, NoiseKind, Pooling, ProbeOptions, RunConfig, TemperatureMode};
pub use contrastive::{capt_loss, MemoryQueue, TemperatureSchedule};
pub use corpus::{Corpus, TokenSequence, Vocabulary};
pub use corruption::{CorruptedPair, Noise};
pub use error::{Error, Result};
pub use params::Params;
pub use tape::{Gradients, Reduction, Segment, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{run_pretrain, MetricsRow, Trainer};
