//! Contrastive objective between a batch of sequences and their corrupted
//! versions, with extra negatives from a FIFO memory queue.
//!
//! For a batch of `n` pairs with unit rows `S` (originals) and `Ŝ`
//! (corrupted), the loss of original `i` is
//!
//! ```text
//! L(xᵢ) = −log( exp(sᵢ·ŝᵢ/τ) / Z ),
//! Z = Σⱼ exp(sᵢ·ŝⱼ/τ) + Σⱼ≠ᵢ exp(sᵢ·sⱼ/τ) + Σ_q exp(sᵢ·q/τ)
//! ```
//!
//! and `L(x̂ᵢ)` swaps the roles of `S` and `Ŝ`. Stacking `P = [S; Ŝ]`, every
//! term is a softmax cross-entropy over one row of `[P·Pᵀ | P·Qᵀ]/τ` with the
//! diagonal removed, which is how it is computed here.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tape::{dot, Reduction, Tape, Var};
use crate::tensor::Tensor;

/// Tolerance on `|‖v‖ − 1|` for rows entering the loss or the queue.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Floor of the adaptive temperature schedule.
pub const MIN_TEMPERATURE: f64 = 0.05;

pub fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let (r, _) = t.require_matrix("unit rows")?;
    for i in 0..r {
        let norm = dot(t.row(i), t.row(i)).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperatureSchedule {
    /// Inverted triangle: high at both ends, [`MIN_TEMPERATURE`] halfway.
    Adaptive {
        total_steps: usize,
    },
    Fixed(f64),
}

impl TemperatureSchedule {
    pub fn temperature(&self, t: usize) -> Result<f64> {
        match *self {
            TemperatureSchedule::Adaptive { total_steps } => {
                if total_steps == 0 {
                    return Err(Error::Schedule(
                        "adaptive schedule needs total_steps > 0".into(),
                    ));
                }
                if t > total_steps {
                    return Err(Error::Schedule(format!(
                        "step {t} beyond total {total_steps}"
                    )));
                }
                let big_t = total_steps as f64;
                Ok((t as f64 - big_t / 2.0).abs() / big_t + MIN_TEMPERATURE)
            }
            TemperatureSchedule::Fixed(tau) if tau > 0.0 => Ok(tau),
            TemperatureSchedule::Fixed(tau) => Err(Error::Schedule(format!(
                "temperature {tau} must be positive"
            ))),
        }
    }
}

/// Fixed-capacity FIFO of detached unit vectors, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryQueue {
    /// A queue of capacity 0 is disabled: it never stores anything.
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    /// Rebuilds a queue from stored entries (oldest first).
    pub fn from_entries(capacity: usize, dim: usize, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "{} queue entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        if entries.iter().any(|e| e.len() != dim) {
            return Err(Error::Checkpoint("queue entry of wrong width".into()));
        }
        Ok(Self {
            capacity,
            dim,
            entries: entries.into(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Immutable copy of the current entries, or `None` when empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Some(Tensor::new(vec![self.entries.len(), self.dim], data).expect("consistent rows"))
    }

    /// Appends every row of `s` and then every row of `s_hat`, evicting the
    /// oldest entries beyond capacity.
    pub fn enqueue_batch(&mut self, s: &Tensor, s_hat: &Tensor) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        for t in [s, s_hat] {
            let (_, d) = t.require_matrix("enqueue")?;
            if d != self.dim {
                return Err(Error::dim(
                    "enqueue",
                    format!("rows of width {d}, queue holds {}", self.dim),
                ));
            }
        }
        if s.rows() + s_hat.rows() > self.capacity {
            return Err(Error::Config(format!(
                "batch of {} representations exceeds queue capacity {}",
                s.rows() + s_hat.rows(),
                self.capacity
            )));
        }
        check_unit_rows(s, "queued")?;
        check_unit_rows(s_hat, "queued")?;
        for t in [s, s_hat] {
            for i in 0..t.rows() {
                if self.entries.len() == self.capacity {
                    self.entries.pop_front();
                }
                self.entries.push_back(t.row(i).to_vec());
            }
        }
        Ok(())
    }
}

/// Per-instance losses: a length-`2n` vector holding `L(x₁..xₙ)` followed by
/// `L(x̂₁..x̂ₙ)`. Queue entries enter as constants.
pub fn capt_terms(
    tape: &mut Tape,
    s: Var,
    s_hat: Var,
    queue: Option<&Tensor>,
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Schedule(format!(
            "temperature {tau} must be positive"
        )));
    }
    let (n, d) = tape.value(s).require_matrix("capt_loss")?;
    if tape.shape(s_hat) != [n, d] {
        return Err(Error::dim("capt_loss", "S and Ŝ shapes differ"));
    }
    check_unit_rows(tape.value(s), "S")?;
    check_unit_rows(tape.value(s_hat), "Ŝ")?;
    let p = tape.concat_rows(&[s, s_hat])?;
    let mut sim = tape.matmul_nt(p, p)?;
    if let Some(q) = queue.filter(|q| q.numel() > 0) {
        if q.cols() != d {
            return Err(Error::dim("capt_loss", "queue width differs from S"));
        }
        check_unit_rows(q, "queue")?;
        let qv = tape.constant(q.clone());
        let sim_q = tape.matmul_nt(p, qv)?;
        sim = tape.concat_cols(&[sim, sim_q])?;
    }
    let logits = tape.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..2 * n).map(|r| (r + n) % (2 * n)).collect();
    let exclude: Vec<usize> = (0..2 * n).collect();
    tape.cross_entropy(logits, &targets, Some(&exclude), Reduction::None)
}

/// Σᵢ [L(xᵢ) + L(x̂ᵢ)].
pub fn capt_loss(
    tape: &mut Tape,
    s: Var,
    s_hat: Var,
    queue: Option<&Tensor>,
    tau: f64,
) -> Result<Var> {
    let terms = capt_terms(tape, s, s_hat, queue, tau)?;
    Ok(tape.sum(terms))
}

/// Plain-value convenience wrapper around [`capt_loss`].
pub fn capt_loss_value(
    s: &Tensor,
    s_hat: &Tensor,
    queue: Option<&Tensor>,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let hv = tape.constant(s_hat.clone());
    let loss = capt_loss(&mut tape, sv, hv, queue, tau)?;
    Ok(tape.value(loss).item())
}

/// Closed-form `∂L(xᵢ)/∂sᵢ` with every other row held fixed and no queue:
///
/// ```text
/// (1/τZ)·[(exp(sᵢ·ŝᵢ/τ) − Z)·ŝᵢ + Σⱼ≠ᵢ (exp(sᵢ·sⱼ/τ)·sⱼ + exp(sᵢ·ŝⱼ/τ)·ŝⱼ)]
/// ```
///
/// Exponents are shifted by their maximum; the shift cancels in the ratio.
pub fn capt_grad_closed_form(s: &Tensor, s_hat: &Tensor, tau: f64, i: usize) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Schedule(format!(
            "temperature {tau} must be positive"
        )));
    }
    let (n, d) = s.require_matrix("capt_grad")?;
    if s_hat.shape() != [n, d] {
        return Err(Error::dim("capt_grad", "S and Ŝ shapes differ"));
    }
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    check_unit_rows(s, "S")?;
    check_unit_rows(s_hat, "Ŝ")?;
    let si = s.row(i);
    let pos = dot(si, s_hat.row(i)) / tau;
    let mut others = Vec::with_capacity(2 * n);
    for j in (0..n).filter(|&j| j != i) {
        others.push((dot(si, s.row(j)) / tau, s.row(j)));
        others.push((dot(si, s_hat.row(j)) / tau, s_hat.row(j)));
    }
    let max = others.iter().map(|o| o.0).fold(pos, f64::max);
    let e_pos = (pos - max).exp();
    let z = e_pos + others.iter().map(|o| (o.0 - max).exp()).sum::<f64>();
    let mut g = vec![0.0; d];
    for (k, v) in g.iter_mut().enumerate() {
        *v = (e_pos - z) * s_hat.row(i)[k];
    }
    for &(logit, row) in &others {
        let w = (logit - max).exp();
        for (k, v) in g.iter_mut().enumerate() {
            *v += w * row[k];
        }
    }
    g.iter_mut().for_each(|v| *v /= tau * z);
    Ok(g)
}

/// Batch mean of `sᵢ·ŝᵢ`.
pub fn mean_pair_cosine(s: &Tensor, s_hat: &Tensor) -> f64 {
    let n = s.rows();
    (0..n).map(|i| dot(s.row(i), s_hat.row(i))).sum::<f64>() / n as f64
}
