//! Helpers shared by the integration tests.

use capt_core::diagnostics::random_matrix;
use capt_core::rng::StreamRng;
use capt_core::Tensor;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Double loop over every instance with an explicit log-sum-exp.
pub fn naive_loss(s: &Tensor, s_hat: &Tensor, queue: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.rows();
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| s.row(i))
        .chain((0..n).map(|i| s_hat.row(i)))
        .collect();
    let mut total = 0.0;
    for r in 0..2 * n {
        let positive = (r + n) % (2 * n);
        let mut logits = Vec::new();
        for (c, other) in rows.iter().enumerate() {
            if c != r {
                logits.push((c == positive, dot(rows[r], other) / tau));
            }
        }
        for q in queue {
            logits.push((false, dot(rows[r], q) / tau));
        }
        let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l.1 - max).exp()).sum::<f64>().ln();
        let pos = logits.iter().find(|l| l.0).expect("positive present").1;
        total += lse - pos;
    }
    total
}

pub fn random_orthogonal(d: usize, rng: &mut StreamRng) -> Tensor {
    let a = random_matrix(d, d, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = a.row(i).to_vec();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Tensor::from_rows(&basis).unwrap()
}

pub fn rotate(t: &Tensor, r: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|i| (0..r.rows()).map(|k| dot(t.row(i), r.row(k))).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}
