//! Gradient verification: the closed-form contrastive gradient against reverse
//! mode and finite differences, plus per-op and whole-model checks.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::EncoderConfig;
use crate::contrastive::{capt_grad_closed_form, capt_loss, capt_terms};
use crate::corpus::TokenSequence;
use crate::encoder::{aggregate, encode, init_params};
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::mlm::{mlm_loss, MlmLabel};
use crate::params::Bound;
use crate::rng::{stream, StreamRng};
use crate::tape::{dot, Reduction, Segment, Tape, Var, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// One line of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
    /// Where the worst discrepancy occurred, when known.
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.threshold
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "ok" } else { "FAIL" };
        write!(
            f,
            "{:<34} {:>12.3e}  (limit {:.0e})  {status}",
            self.name, self.max_error, self.threshold
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random batches for the closed-form comparison.
    pub batches: usize,
    /// Scales every reverse-mode gradient by `1 + perturb`; nonzero values
    /// exist to prove the suite catches a wrong gradient.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            batches: 50,
            perturb: 0.0,
        }
    }
}

/// Matrix of `rows` random unit vectors in `R^cols`.
pub fn random_unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    for r in data.chunks_mut(cols) {
        let n = dot(r, r).sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// `L(xᵢ)` by direct summation, with no unit-norm requirement, so that it can
/// be differentiated numerically in the ambient space.
fn term_loss(s: &Tensor, s_hat: &Tensor, tau: f64, i: usize) -> f64 {
    let si = s.row(i);
    let mut logits = vec![dot(si, s_hat.row(i)) / tau];
    for j in (0..s.rows()).filter(|&j| j != i) {
        logits.push(dot(si, s.row(j)) / tau);
        logits.push(dot(si, s_hat.row(j)) / tau);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    max + z.ln() - logits[0]
}

/// Largest elementwise difference divided by the larger infinity norm of the
/// two vectors.
pub fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(1e-12, f64::max);
    diff / scale
}

/// Worst discrepancies of the closed-form gradient over random batches:
/// `(|closed − reverse| absolute, closed vs finite differences, reverse vs
/// finite differences)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleCheck {
    pub closed_vs_reverse: f64,
    pub closed_vs_numeric: f64,
    pub reverse_vs_numeric: f64,
}

pub fn closed_form_triple_check(batches: usize, seed: u64, perturb: f64) -> Result<TripleCheck> {
    let mut rng = stream(seed, 0);
    let mut out = TripleCheck {
        closed_vs_reverse: 0.0,
        closed_vs_numeric: 0.0,
        reverse_vs_numeric: 0.0,
    };
    let h = 1e-5;
    for _ in 0..batches {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=16);
        let tau = rng.random_range(0.05..=0.55);
        let s = random_unit_rows(n, d, &mut rng);
        let s_hat = random_unit_rows(n, d, &mut rng);

        for i in 0..n {
            let closed = capt_grad_closed_form(&s, &s_hat, tau, i)?;

            let mut t = Tape::new();
            let sv = t.param("s", s.clone().into())?;
            let hv = t.param("s_hat", s_hat.clone().into())?;
            let term = select_term(&mut t, sv, hv, tau, i)?;
            let g = t.backward(term)?;
            let reverse: Vec<f64> = g
                .get("s")
                .expect("s")
                .row(i)
                .iter()
                .map(|v| v * (1.0 + perturb))
                .collect();

            let numeric: Vec<f64> = (0..d)
                .map(|k| {
                    let shifted = |delta: f64| {
                        let mut p = s.clone();
                        p.row_mut(i)[k] += delta;
                        term_loss(&p, &s_hat, tau, i)
                    };
                    (shifted(h) - shifted(-h)) / (2.0 * h)
                })
                .collect();

            let abs = closed
                .iter()
                .zip(&reverse)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            out.closed_vs_reverse = out.closed_vs_reverse.max(abs);
            out.closed_vs_numeric = out.closed_vs_numeric.max(normwise_error(&closed, &numeric));
            out.reverse_vs_numeric = out
                .reverse_vs_numeric
                .max(normwise_error(&reverse, &numeric));
        }
    }
    Ok(out)
}

/// `L(xᵢ)` alone, as a scalar on the tape.
fn select_term(tape: &mut Tape, s: Var, s_hat: Var, tau: f64, i: usize) -> Result<Var> {
    let terms = capt_terms(tape, s, s_hat, None, tau)?;
    let mut onehot = vec![0.0; tape.value(terms).numel()];
    onehot[i] = 1.0;
    let mask = tape.constant(Tensor::vector(onehot));
    let picked = tape.mul(terms, mask)?;
    Ok(tape.sum(picked))
}

fn result(name: &str, threshold: f64, r: &GradCheckReport) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_error: r.max_rel_error,
        threshold,
        detail: format!(
            "worst {}[{}]: {:.6e} vs {:.6e}",
            r.param, r.index, r.analytic, r.numeric
        ),
    }
}

fn op_check<F>(
    checker: &GradCheck,
    name: &str,
    threshold: f64,
    params: &[(&str, Tensor)],
    f: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(result(name, threshold, &checker.run(f, params)?))
}

/// Weighted sum of an op's output so every output element reaches the loss
/// with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, v: Var, rng: &mut StreamRng) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv)?;
    Ok(tape.sum(prod))
}

/// Configuration of the whole-model check: every architectural feature at
/// toy width.
pub fn toy_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn_inner: 12,
        agg_inner: 10,
        agg_out: 8,
        max_len: 7,
        vocab_size: 14,
        batch_size: 3,
        queue_capacity: 12,
        ..EncoderConfig::tiny()
    }
}

/// Total pre-training loss of the toy model with dropout frozen, as a
/// function of every parameter.
pub fn whole_model_check(
    seed: u64,
    perturb: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut rng = stream(seed, 1);
    let params = init_params(&cfg, &mut rng);
    // Larger-than-default weights keep gradients well above round-off.
    let params: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
            } else {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.2..0.2));
            }
            (n.to_string(), t)
        })
        .collect();
    let originals = vec![
        TokenSequence::from_parts(vec![2, 5, 6, 7, 3, 0, 0], 5)?,
        TokenSequence::from_parts(vec![2, 8, 9, 3, 0, 0, 0], 4)?,
        TokenSequence::from_parts(vec![2, 10, 11, 12, 13, 5, 3], 7)?,
    ];
    let corrupted = vec![
        TokenSequence::from_parts(vec![2, 4, 6, 7, 3, 0, 0], 5)?,
        TokenSequence::from_parts(vec![2, 8, 4, 3, 0, 0, 0], 4)?,
        TokenSequence::from_parts(vec![2, 10, 11, 4, 13, 9, 3], 7)?,
    ];
    let labels = vec![
        MlmLabel {
            batch: 0,
            position: 1,
            id: 5,
        },
        MlmLabel {
            batch: 1,
            position: 2,
            id: 9,
        },
        MlmLabel {
            batch: 2,
            position: 3,
            id: 12,
        },
        MlmLabel {
            batch: 2,
            position: 5,
            id: 5,
        },
    ];
    let queue = random_unit_rows(5, cfg.agg_out, &mut rng);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let refs: Vec<(&str, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.as_str(), t.clone()))
        .collect();
    let checker = GradCheck {
        step: 1e-3,
        five_point: true,
        max_per_param,
        perturb,
    };
    checker.run(
        |tape, vars| {
            let bound =
                Bound::from_pairs(names.iter().map(String::as_str).zip(vars.iter().copied()));
            let ex = encode::<StreamRng>(tape, &bound, &cfg, &originals, None)?;
            let exh = encode::<StreamRng>(tape, &bound, &cfg, &corrupted, None)?;
            let s = aggregate(tape, &bound, &cfg, &ex)?;
            let sh = aggregate(tape, &bound, &cfg, &exh)?;
            let capt = capt_loss(tape, s, sh, Some(&queue), 0.3)?;
            let capt = tape.scale(capt, 1.0 / 6.0);
            let mlm = mlm_loss(tape, &bound, &exh, &labels)?;
            tape.add(capt, mlm)
        },
        &refs,
    )
}

pub const CLOSED_VS_REVERSE_LIMIT: f64 = 1e-10;
pub const VS_NUMERIC_LIMIT: f64 = 1e-6;
pub const OP_LIMIT: f64 = 1e-6;
pub const MODEL_LIMIT: f64 = 1e-5;

/// Every check of the suite, in report order.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let triple = closed_form_triple_check(opts.batches, opts.seed, opts.perturb)?;
    let mut out = vec![
        CheckResult {
            name: "closed form vs reverse mode".into(),
            max_error: triple.closed_vs_reverse,
            threshold: CLOSED_VS_REVERSE_LIMIT,
            detail: String::new(),
        },
        CheckResult {
            name: "closed form vs finite diff".into(),
            max_error: triple.closed_vs_numeric,
            threshold: VS_NUMERIC_LIMIT,
            detail: String::new(),
        },
        CheckResult {
            name: "reverse mode vs finite diff".into(),
            max_error: triple.reverse_vs_numeric,
            threshold: VS_NUMERIC_LIMIT,
            detail: String::new(),
        },
    ];

    let checker = GradCheck {
        step: 1e-3,
        five_point: true,
        max_per_param: None,
        perturb: opts.perturb,
    };
    let mut rng = stream(opts.seed, 2);
    let a = random_matrix(4, 5, 1.0, &mut rng);
    let b = random_matrix(5, 3, 1.0, &mut rng);
    let bt = random_matrix(3, 5, 1.0, &mut rng);
    let bias = random_matrix(1, 5, 1.0, &mut rng).reshape(vec![5])?;
    let w_out = |tape: &mut Tape, v: Var, seed: u64| weighted_sum(tape, v, &mut stream(seed, 3));

    out.push(op_check(
        &checker,
        "matmul",
        OP_LIMIT,
        &[("a", a.clone()), ("b", b)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            w_out(t, y, 1)
        },
    )?);
    out.push(op_check(
        &checker,
        "matmul (transposed rhs)",
        OP_LIMIT,
        &[("a", a.clone()), ("b", bt)],
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            w_out(t, y, 2)
        },
    )?);
    out.push(op_check(
        &checker,
        "bias add + gelu",
        OP_LIMIT,
        &[("a", a.clone()), ("bias", bias.clone())],
        |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.gelu(y);
            w_out(t, y, 3)
        },
    )?);
    let gain = random_matrix(1, 5, 1.0, &mut rng).reshape(vec![5])?;
    out.push(op_check(
        &checker,
        "layer norm",
        OP_LIMIT,
        &[("x", a.clone()), ("gain", gain), ("bias", bias)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            w_out(t, y, 4)
        },
    )?);
    out.push(op_check(
        &checker,
        "softmax rows",
        OP_LIMIT,
        &[("x", a.clone())],
        |t, v| {
            let y = t.softmax_rows(v[0])?;
            w_out(t, y, 5)
        },
    )?);
    out.push(op_check(
        &checker,
        "l2 normalize rows",
        OP_LIMIT,
        &[("x", a.clone())],
        |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            w_out(t, y, 6)
        },
    )?);
    out.push(op_check(
        &checker,
        "embedding gather",
        OP_LIMIT,
        &[("table", a.clone())],
        |t, v| {
            let y = t.embedding_gather(v[0], &[3, 0, 3, 1])?;
            w_out(t, y, 7)
        },
    )?);
    let segments = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 3 }];
    let q = random_matrix(6, 4, 1.0, &mut rng);
    let k = random_matrix(6, 4, 1.0, &mut rng);
    let v6 = random_matrix(6, 4, 1.0, &mut rng);
    out.push(op_check(
        &checker,
        "attention",
        OP_LIMIT,
        &[("q", q), ("k", k), ("v", v6.clone())],
        |t, v| {
            let y = t.attention(v[0], v[1], v[2], &segments, 2)?;
            w_out(t, y, 8)
        },
    )?);
    let seg2 = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 4 }];
    out.push(op_check(
        &checker,
        "segment mean",
        OP_LIMIT,
        &[("x", v6)],
        |t, v| {
            let y = t.segment_mean(v[0], &seg2)?;
            w_out(t, y, 9)
        },
    )?);
    out.push(op_check(
        &checker,
        "cross entropy (excluded column)",
        OP_LIMIT,
        &[("x", a)],
        |t, v| t.cross_entropy(v[0], &[1, 4, 0, 2], Some(&[0, 3, 2, 1]), Reduction::Sum),
    )?);
    let s = random_unit_rows(4, 6, &mut rng);
    let s_hat = random_unit_rows(4, 6, &mut rng);
    let queue = random_unit_rows(5, 6, &mut rng);
    out.push(op_check(
        &checker,
        "contrastive loss with queue",
        OP_LIMIT,
        &[("s", s), ("s_hat", s_hat)],
        |t, v| {
            // Finite differences leave the unit sphere, so normalize inside.
            let a = t.l2_normalize_rows(v[0])?;
            let b = t.l2_normalize_rows(v[1])?;
            capt_loss(t, a, b, Some(&queue), 0.2)
        },
    )?);

    out.push(result(
        "whole model, dropout frozen",
        MODEL_LIMIT,
        &whole_model_check(opts.seed, opts.perturb, None)?,
    ));
    Ok(out)
}
