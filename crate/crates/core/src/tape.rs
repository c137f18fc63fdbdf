//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Leaves are either constants or named parameters. A backward pass returns a
//! gradient for every registered parameter (zero when the loss does not depend
//! on it). A tape can be differentiated exactly once.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows with a Euclidean norm at or below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Keep one loss per row.
    None,
}

/// Contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    MaskApply {
        a: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        exclude: Option<Vec<usize>>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentMean {
        a: Var,
        segments: Vec<Segment>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant leaf; no gradient is ever propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    /// Registers a named parameter leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        let v = self.push_arc(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product `a[p×q] · b[q×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).require_matrix("matmul")?;
        let (q2, r) = self.value(b).require_matrix("matmul")?;
        if q != q2 {
            return Err(Error::dim("matmul", format!("[{p}x{q}] x [{q2}x{r}]")));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![p, r], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            needs,
        ))
    }

    /// Matrix product with the second operand transposed: `a[p×q] · b[r×q]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).require_matrix("matmul_nt")?;
        let (r, q2) = self.value(b).require_matrix("matmul_nt")?;
        if q != q2 {
            return Err(Error::dim("matmul_nt", format!("[{p}x{q}] x [{r}x{q2}]^T")));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            0.0,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![p, r], out)?,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            needs,
        ))
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.is_scalar() {
            Ok(sa.shape().to_vec())
        } else if sa.is_scalar() {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::dim(
                op,
                format!("{:?} vs {:?}", sa.shape(), sb.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out = (0..n).map(|i| f(at(va, i), at(vb, i))).collect();
        Ok((Tensor::new(shape, out)?, self.needs(a) || self.needs(b)))
    }

    /// Elementwise sum; shapes must match exactly or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let out = src.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, factor }, needs)
    }

    /// Adds a length-`q` bias vector to every row of a `p×q` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, q) = self.value(a).require_matrix("add_bias")?;
        if self.value(bias).numel() != q {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for {q} columns", self.shape(bias)),
            ));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { a, bias }, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let src = self.value(a);
        let out = src.data().iter().map(|&x| f(x)).collect();
        (
            Tensor::new(src.shape().to_vec(), out).expect("same shape"),
            self.needs(a),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (t, needs) = self.unary(a, gelu);
        self.push(t, Op::Gelu { a }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (t, needs) = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu { a }, needs)
    }

    /// Multiplies by a pre-drawn mask of the same shape.
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::dim("apply_mask", "mask length differs from operand"));
        }
        let src = self.value(a);
        let out = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::MaskApply { a, mask }, needs))
    }

    /// Inverted dropout. Draws a keep-mask scaled by `1/(1-rate)` from `rng`;
    /// with `rate == 0` or no RNG (evaluation mode) it is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let Some(rng) = rng else { return Ok(a) };
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Contract(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.apply_mask(a, mask)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        src.require_matrix("softmax_rows")?;
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(src.cols()) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows { a }, needs))
    }

    /// Per-row standardization followed by the affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (p, d) = self.value(x).require_matrix("layer_norm")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("gain/bias must have {d} elements"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; p * d];
        let mut inv_std = vec![0.0; p];
        let mut out = vec![0.0; p * d];
        for r in 0..p {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![p, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm at or below
    /// [`MIN_ROW_NORM`] are rejected.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        src.require_matrix("l2_normalize_rows")?;
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for (r, row) in out.data_mut().chunks_mut(src.cols()).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= MIN_ROW_NORM {
                return Err(Error::DegenerateRow { row: r, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let needs = self.needs(a);
        Ok(self.push(out, Op::L2NormalizeRows { a, norms }, needs))
    }

    /// Selects rows `ids` of a `V×d` table. Backward scatter-adds.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).require_matrix("embedding_gather")?;
        if ids.is_empty() {
            return Err(Error::dim("embedding_gather", "no ids"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, len: v });
            }
            out.extend_from_slice(src.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::dim("concat_rows", "no parts"))?,
            )
            .cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            t.require_matrix("concat_rows")?;
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::dim("concat_cols", "no parts"))?,
            )
            .rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            t.require_matrix("concat_cols")?;
            if t.rows() != rows {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean { a }, needs)
    }

    /// Softmax cross-entropy of each row of `logits` against `targets`.
    ///
    /// When `exclude` is given, column `exclude[r]` of row `r` is removed from
    /// that row's softmax entirely (it must differ from the target).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude: Option<&[usize]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (p, q) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != p || exclude.is_some_and(|e| e.len() != p) {
            return Err(Error::dim("cross_entropy", "one target per row required"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; p * q];
        let mut losses = Vec::with_capacity(p);
        for r in 0..p {
            let t = targets[r];
            let ex = exclude.map(|e| e[r]);
            if t >= q {
                return Err(Error::Index { index: t, len: q });
            }
            if ex == Some(t) {
                return Err(Error::Contract(format!(
                    "row {r}: target column is excluded"
                )));
            }
            let row = &src[r * q..(r + 1) * q];
            let live = |c: usize| ex != Some(c);
            let max = (0..q)
                .filter(|&c| live(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in (0..q).filter(|&c| live(c)) {
                let e = (row[c] - max).exp();
                probs[r * q + c] = e;
                z += e;
            }
            probs[r * q..(r + 1) * q].iter_mut().for_each(|v| *v /= z);
            losses.push(max + z.ln() - row[t]);
        }
        let out = match reduction {
            Reduction::Sum => Tensor::scalar(losses.iter().sum()),
            Reduction::Mean => Tensor::scalar(losses.iter().sum::<f64>() / p as f64),
            Reduction::None => Tensor::vector(losses),
        };
        let needs = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                exclude: exclude.map(<[usize]>::to_vec),
                probs,
                reduction,
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product self-attention over a packed batch.
    ///
    /// `q`, `k`, `v` are `N×d`; each segment attends only within itself, so
    /// padding never needs to be materialized. Rows outside every segment are
    /// zero in the output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.value(q).require_matrix("attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::dim("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("{d} not divisible by {heads} heads"),
            ));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.start + s.len > n) {
            return Err(Error::dim(
                "attention",
                format!("segment {s:?} outside {n} rows"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| heads * s.len * s.len).sum());
        for seg in segments {
            for h in 0..heads {
                let col = h * dh;
                let base = probs.len();
                probs.resize(base + seg.len * seg.len, 0.0);
                let p = &mut probs[base..];
                for i in 0..seg.len {
                    let qi = &qd[(seg.start + i) * d + col..][..dh];
                    let row = &mut p[i * seg.len..(i + 1) * seg.len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d + col..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(seg.start + i) * d + col..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + col..][..dh];
                        axpy(pij, vj, oi);
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Mean of the rows of each segment: `N×d` → `segments×d`.
    pub fn segment_mean(&mut self, a: Var, segments: &[Segment]) -> Result<Var> {
        let (n, d) = self.value(a).require_matrix("segment_mean")?;
        if segments.is_empty() || segments.iter().any(|s| s.len == 0 || s.start + s.len > n) {
            return Err(Error::dim("segment_mean", "invalid segments"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; segments.len() * d];
        for (i, s) in segments.iter().enumerate() {
            let o = &mut out[i * d..(i + 1) * d];
            for r in s.start..s.start + s.len {
                axpy(1.0 / s.len as f64, &src[r * d..(r + 1) * d], o);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![segments.len(), d], out)?,
            Op::SegmentMean {
                a,
                segments: segments.to_vec(),
            },
            needs,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Differentiates the scalar `loss` with respect to every registered
    /// parameter. Consumes the tape's single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = Vec::new();
        leaf_grads.resize_with(loss.0 + 1, || None);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => leaf_grads[i] = Some(g),
                Op::MatMul { a, b, trans_b } => {
                    let (p, q) = (self.value(*a).rows(), self.value(*a).cols());
                    let r = node.value.cols();
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if let Some(slot) = acc.slot(*a) {
                        // dA = dC · op(B)ᵀ
                        gemm(p, r, q, 1.0, &g, false, bv, !trans_b, 1.0, slot);
                    }
                    if let Some(slot) = acc.slot(*b) {
                        if *trans_b {
                            // B is r×q: dB = dCᵀ · A
                            gemm(r, p, q, 1.0, &g, true, av, false, 1.0, slot);
                        } else {
                            // B is q×r: dB = Aᵀ · dC
                            gemm(q, p, r, 1.0, av, true, &g, false, 1.0, slot);
                        }
                    }
                }
                Op::Add { a, b } => {
                    acc.add_broadcast(*a, &g, 1.0);
                    acc.add_broadcast(*b, &g, 1.0);
                }
                Op::Sub { a, b } => {
                    acc.add_broadcast(*a, &g, 1.0);
                    acc.add_broadcast(*b, &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(bv, i)).collect();
                    let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(av, i)).collect();
                    acc.add_broadcast(*a, &ga, 1.0);
                    acc.add_broadcast(*b, &gb, 1.0);
                }
                Op::Scale { a, factor } => {
                    if let Some(slot) = acc.slot(*a) {
                        axpy(*factor, &g, slot);
                    }
                }
                Op::AddBias { a, bias } => {
                    if let Some(slot) = acc.slot(*a) {
                        axpy(1.0, &g, slot);
                    }
                    if let Some(slot) = acc.slot(*bias) {
                        let q = slot.len();
                        for row in g.chunks(q) {
                            axpy(1.0, row, slot);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let x = self.value(*a).data();
                    if let Some(slot) = acc.slot(*a) {
                        for ((s, gi), xi) in slot.iter_mut().zip(&g).zip(x) {
                            *s += gi * gelu_grad(*xi);
                        }
                    }
                }
                Op::Relu { a } => {
                    let x = self.value(*a).data();
                    if let Some(slot) = acc.slot(*a) {
                        for ((s, gi), xi) in slot.iter_mut().zip(&g).zip(x) {
                            if *xi > 0.0 {
                                *s += gi;
                            }
                        }
                    }
                }
                Op::MaskApply { a, mask } => {
                    if let Some(slot) = acc.slot(*a) {
                        for ((s, gi), m) in slot.iter_mut().zip(&g).zip(mask) {
                            *s += gi * m;
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let y = node.value.data();
                    let q = node.value.cols();
                    if let Some(slot) = acc.slot(*a) {
                        for ((srow, grow), yrow) in
                            slot.chunks_mut(q).zip(g.chunks(q)).zip(y.chunks(q))
                        {
                            let inner = dot(grow, yrow);
                            for c in 0..q {
                                srow[c] += yrow[c] * (grow[c] - inner);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.cols();
                    let gv = self.value(*gain).data();
                    if let Some(slot) = acc.slot(*gain) {
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                slot[c] += grow[c] * hrow[c];
                            }
                        }
                    }
                    if let Some(slot) = acc.slot(*bias) {
                        for grow in g.chunks(d) {
                            axpy(1.0, grow, slot);
                        }
                    }
                    if let Some(slot) = acc.slot(*x) {
                        let mut dxhat = vec![0.0; d];
                        for (r, ((srow, grow), hrow)) in slot
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            for c in 0..d {
                                dxhat[c] = grow[c] * gv[c];
                            }
                            let sum = dxhat.iter().sum::<f64>();
                            let sum_h = dot(&dxhat, hrow);
                            let k = inv_std[r] / d as f64;
                            for c in 0..d {
                                srow[c] += k * (d as f64 * dxhat[c] - sum - hrow[c] * sum_h);
                            }
                        }
                    }
                }
                Op::L2NormalizeRows { a, norms } => {
                    let y = node.value.data();
                    let q = node.value.cols();
                    if let Some(slot) = acc.slot(*a) {
                        for (r, ((srow, grow), yrow)) in slot
                            .chunks_mut(q)
                            .zip(g.chunks(q))
                            .zip(y.chunks(q))
                            .enumerate()
                        {
                            let inner = dot(grow, yrow);
                            for c in 0..q {
                                srow[c] += (grow[c] - yrow[c] * inner) / norms[r];
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = node.value.cols();
                    if let Some(slot) = acc.slot(*table) {
                        for (grow, &id) in g.chunks(d).zip(ids) {
                            axpy(1.0, grow, &mut slot[id * d..(id + 1) * d]);
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if let Some(slot) = acc.slot(p) {
                            axpy(1.0, &g[offset..offset + len], slot);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if let Some(slot) = acc.slot(p) {
                            for (srow, grow) in slot.chunks_mut(c).zip(g.chunks(total)) {
                                axpy(1.0, &grow[offset..offset + c], srow);
                            }
                        }
                        offset += c;
                    }
                }
                Op::Reshape { a } => {
                    if let Some(slot) = acc.slot(*a) {
                        axpy(1.0, &g, slot);
                    }
                }
                Op::Sum { a } => {
                    if let Some(slot) = acc.slot(*a) {
                        slot.iter_mut().for_each(|s| *s += g[0]);
                    }
                }
                Op::Mean { a } => {
                    if let Some(slot) = acc.slot(*a) {
                        let k = g[0] / slot.len() as f64;
                        slot.iter_mut().for_each(|s| *s += k);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    exclude,
                    probs,
                    reduction,
                } => {
                    let q = self.value(*logits).cols();
                    let p = targets.len();
                    if let Some(slot) = acc.slot(*logits) {
                        for r in 0..p {
                            let gr = match reduction {
                                Reduction::Sum => g[0],
                                Reduction::Mean => g[0] / p as f64,
                                Reduction::None => g[r],
                            };
                            let srow = &mut slot[r * q..(r + 1) * q];
                            axpy(gr, &probs[r * q..(r + 1) * q], srow);
                            srow[targets[r]] -= gr;
                            if let Some(ex) = exclude {
                                // probs already holds 0 there; keep it exact.
                                debug_assert_eq!(probs[r * q + ex[r]], 0.0);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    attention_backward(self, &mut acc, &g, *q, *k, *v, segments, *heads, probs);
                }
                Op::SegmentMean { a, segments } => {
                    let d = node.value.cols();
                    if let Some(slot) = acc.slot(*a) {
                        for (i, s) in segments.iter().enumerate() {
                            let grow = &g[i * d..(i + 1) * d];
                            for r in s.start..s.start + s.len {
                                axpy(1.0 / s.len as f64, grow, &mut slot[r * d..(r + 1) * d]);
                            }
                        }
                    }
                }
            }
        }

        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, var) in &self.params {
            let shape = self.shape(*var).to_vec();
            let data = match leaf_grads.get_mut(var.0).and_then(Option::take) {
                Some(d) => d,
                None => vec![0.0; shape.iter().product()],
            };
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(Gradients { grads: out })
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl Accumulator<'_> {
    /// Gradient buffer for `v`, allocated as zeros on first use; `None` when
    /// `v` does not lead to any parameter.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_broadcast(&mut self, v: Var, g: &[f64], sign: f64) {
        if let Some(slot) = self.slot(v) {
            if slot.len() == g.len() {
                axpy(sign, g, slot);
            } else {
                slot[0] += sign * g.iter().sum::<f64>();
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    tape: &Tape,
    acc: &mut Accumulator<'_>,
    g: &[f64],
    q: Var,
    k: Var,
    v: Var,
    segments: &[Segment],
    heads: usize,
    probs: &[f64],
) {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
    );
    let n = qd.len();
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut offset = 0;
    let mut ds = Vec::new();
    for seg in segments {
        let l = seg.len;
        for h in 0..heads {
            let col = h * dh;
            let p = &probs[offset..offset + l * l];
            offset += l * l;
            ds.clear();
            ds.resize(l * l, 0.0);
            for i in 0..l {
                let gi = &g[(seg.start + i) * d + col..][..dh];
                let prow = &p[i * l..(i + 1) * l];
                let drow = &mut ds[i * l..(i + 1) * l];
                for j in 0..l {
                    let vj = &vd[(seg.start + j) * d + col..][..dh];
                    drow[j] = dot(gi, vj);
                    axpy(prow[j], gi, &mut dv[(seg.start + j) * d + col..][..dh]);
                }
                let inner = dot(drow, prow);
                for j in 0..l {
                    drow[j] = prow[j] * (drow[j] - inner) * scale;
                }
            }
            for i in 0..l {
                let drow = &ds[i * l..(i + 1) * l];
                for j in 0..l {
                    let kj = &kd[(seg.start + j) * d + col..][..dh];
                    axpy(drow[j], kj, &mut dq[(seg.start + i) * d + col..][..dh]);
                    let qi = &qd[(seg.start + i) * d + col..][..dh];
                    axpy(drow[j], qi, &mut dk[(seg.start + j) * d + col..][..dh]);
                }
            }
        }
    }
    for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(slot) = acc.slot(var) {
            axpy(1.0, &grad, slot);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul_and_hand_arithmetic() {
        let mut tape = Tape::new();
        let i2 = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = tape.constant(mat(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));

        let x = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(mat(&[&[1.0], &[1.0]]));
        let out = tape.matmul(x, ones).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
        assert!(matches!(
            tape.matmul(ones, ones),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn add_zero_relu_and_zero_rate_dropout() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[-1.0, 2.0]]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let mut rng = crate::rng::stream(0, 0);
        let d = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(d, x);
        let bad = tape.constant(mat(&[&[1.0, 2.0, 3.0]]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(mat(&[&[2f64.ln(), 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_degenerate_and_zero_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[3.0, 3.0, 3.0, 3.0]]));
        let ones = tape.constant(Tensor::filled(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, ones, zeros, LAYER_NORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(mat(&[&[1.0, -2.0, 5.0, 0.5]]));
        let bias = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, zeros, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[3.0, 4.0], &[0.6, 0.8]]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.6, 0.8]);
        let z = tape.constant(mat(&[&[1e-13, 0.0]]));
        assert!(matches!(
            tape.l2_normalize_rows(z),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape
            .param(
                "table",
                Arc::new(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]])),
            )
            .unwrap();
        let rows = tape.embedding_gather(table, &[0, 2, 0]).unwrap();
        assert_eq!(tape.value(rows).row(0), &[1.0, 2.0]);
        assert!(matches!(
            tape.embedding_gather(table, &[3]),
            Err(Error::Index { index: 3, len: 3 })
        ));
        let loss = tape.sum(rows);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.get("table").unwrap().data(),
            &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(Tensor::scalar(3.0))).unwrap();
        let _unused = tape
            .param("unused", Arc::new(Tensor::scalar(-1.0)))
            .unwrap();
        let xx = tape.mul(x, x).unwrap();
        let loss = tape.sum(xx);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().item(), 6.0);
        assert_eq!(grads.get("unused").unwrap().item(), 0.0);
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape
            .param("x", Arc::new(Tensor::vector(vec![1.0, 2.0])))
            .unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut tape = Tape::new();
        tape.param("w", Arc::new(Tensor::scalar(1.0))).unwrap();
        assert!(tape.param("w", Arc::new(Tensor::scalar(1.0))).is_err());
    }

    #[test]
    fn cross_entropy_excluded_column_is_ignored() {
        let mut tape = Tape::new();
        let logits = tape.constant(mat(&[&[100.0, 0.0, 0.0]]));
        let loss = tape
            .cross_entropy(logits, &[1], Some(&[0]), Reduction::Sum)
            .unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        assert!(tape
            .cross_entropy(logits, &[0], Some(&[0]), Reduction::Sum)
            .is_err());
    }
}
