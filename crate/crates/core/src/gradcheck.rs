//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-12;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst element found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Gradient checker configuration.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub step: f64,
    /// Fourth-order five-point stencil instead of the two-point central
    /// difference. Needs a larger `step` (around 1e-3) to pay off.
    pub five_point: bool,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_per_param: Option<usize>,
    /// Multiplies analytic gradients by `1 + perturb` before comparing. Only
    /// useful for testing that the harness notices a wrong gradient.
    pub perturb: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            five_point: false,
            max_per_param: None,
            perturb: 0.0,
        }
    }
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    /// Compares `backward` against central differences of `f`.
    ///
    /// `f` builds a scalar loss from the given parameter vars; it is called
    /// once for the analytic pass and twice per checked element. It must be
    /// deterministic.
    pub fn run<F>(&self, f: F, params: &[(&str, Tensor)]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        assert!(self.step > 0.0, "finite-difference step must be positive");
        let eval = |values: &[Arc<Tensor>]| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let vars = params
                .iter()
                .zip(values)
                .map(|((name, _), v)| tape.param(name, Arc::clone(v)))
                .collect::<Result<Vec<_>>>()?;
            let loss = f(&mut tape, &vars)?;
            Ok((tape, loss))
        };

        let base: Vec<Arc<Tensor>> = params.iter().map(|(_, t)| Arc::new(t.clone())).collect();
        let (mut tape, loss) = eval(&base)?;
        let grads = tape.backward(loss)?;

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            param: String::new(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for (p, (name, tensor)) in params.iter().enumerate() {
            let analytic = grads.get(name).expect("registered parameter").data();
            for idx in sample_indices(tensor.numel(), self.max_per_param) {
                let probe = |delta: f64| -> Result<f64> {
                    let mut values = base.clone();
                    let mut t = tensor.clone();
                    t.data_mut()[idx] += delta;
                    values[p] = Arc::new(t);
                    let (tape, loss) = eval(&values)?;
                    Ok(tape.value(loss).item())
                };
                let h = self.step;
                let numeric = if self.five_point {
                    (8.0 * (probe(h)? - probe(-h)?) - (probe(2.0 * h)? - probe(-2.0 * h)?))
                        / (12.0 * h)
                } else {
                    (probe(h)? - probe(-h)?) / (2.0 * h)
                };
                let a = analytic[idx] * (1.0 + self.perturb);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || err.is_nan() {
                    report = GradCheckReport {
                        max_rel_error: err,
                        param: name.to_string(),
                        index: idx,
                        analytic: a,
                        numeric,
                        checked: report.checked,
                    };
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between `backward` and central differences.
pub fn grad_check<F>(f: F, params: &[(&str, Tensor)], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::with_step(step).run(f, params)?.max_rel_error)
}

fn sample_indices(numel: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
        _ => (0..numel).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let check = GradCheck::with_step(1e-6);
        let report = check
            .run(
                |tape, v| {
                    let sq = tape.mul(v[0], v[0])?;
                    Ok(tape.sum(sq))
                },
                &[("x", Tensor::scalar(3.0))],
            )
            .unwrap();
        assert!((report.numeric - 6.0).abs() < 1e-6);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            &[("x", Tensor::vector(vec![1.0, 2.0]))],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        let check = GradCheck {
            perturb: 1e-3,
            ..GradCheck::default()
        };
        let report = check
            .run(
                |tape, v| Ok(tape.sum(v[0])),
                &[("x", Tensor::vector(vec![1.0, -1.0]))],
            )
            .unwrap();
        assert!(report.max_rel_error > 5e-4);
    }

    #[test]
    fn sampling_is_even() {
        assert_eq!(sample_indices(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(sample_indices(2, Some(3)), vec![0, 1]);
    }
}
