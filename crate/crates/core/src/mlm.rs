//! Masked-language-model head: tied output projection plus a per-token bias.

use crate::corruption::CorruptedPair;
use crate::encoder::{Encoded, MLM_BIAS, TOKEN_EMBEDDING};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tape::{Reduction, Tape, Var};

/// One prediction target: original `id` at `position` of sequence `batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmLabel {
    pub batch: usize,
    pub position: usize,
    pub id: usize,
}

/// Flattens the per-pair labels of a corrupted batch.
pub fn batch_labels(pairs: &[CorruptedPair]) -> Vec<MlmLabel> {
    pairs
        .iter()
        .enumerate()
        .flat_map(|(batch, pair)| {
            pair.mlm_labels.iter().map(move |&(position, id)| MlmLabel {
                batch,
                position,
                id,
            })
        })
        .collect()
}

/// Mean softmax cross-entropy over the labeled positions of the corrupted
/// pass. Logits are `h · Eᵀ + b` with `E` the token embedding table.
pub fn mlm_loss(
    tape: &mut Tape,
    bound: &Bound,
    corrupted: &Encoded,
    labels: &[MlmLabel],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("MLM loss needs at least one label".into()));
    }
    let rows = labels
        .iter()
        .map(|l| corrupted.row(l.batch, l.position))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = labels.iter().map(|l| l.id).collect();
    let h = tape.embedding_gather(corrupted.hidden, &rows)?;
    let logits = tape.matmul_nt(h, bound.get(TOKEN_EMBEDDING)?)?;
    let logits = tape.add_bias(logits, bound.get(MLM_BIAS)?)?;
    tape.cross_entropy(logits, &targets, None, Reduction::Mean)
}
