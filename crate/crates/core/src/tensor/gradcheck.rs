//! Central-difference gradient checking in `f64`.

use super::{RngStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±epsilon probes changed a relu sign, pooling argmax or
    /// clamp, where central differences are meaningless.
    pub skipped: usize,
}

/// `Σ out ⊙ weights`: a scalar probe with non-degenerate gradients.
pub fn weighted_sum<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(out.mul(out.tape().constant(weights.clone()))?.sum())
}

/// Checks every entry of `input`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, epsilon: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..input.len()).collect();
    check_entries(&f, input, epsilon, &all)
}

/// Checks at most `max_entries` entries drawn without replacement.
pub fn grad_check_sampled<F>(
    f: F,
    input: &Tensor<f64>,
    epsilon: f64,
    max_entries: usize,
    rng: &mut RngStream,
) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut idx: Vec<usize> = (0..input.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(max_entries);
    idx.sort_unstable();
    check_entries(&f, input, epsilon, &idx)
}

fn evaluate<F>(f: &F, input: Tensor<f64>) -> Result<(f64, u64)>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::with_branch_tracking();
    let y = f(tape.leaf(input))?.value().item()?;
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check function returned {y}")));
    }
    Ok((y, tape.branch_signature()))
}

fn check_entries<F>(f: &F, input: &Tensor<f64>, epsilon: f64, entries: &[usize]) -> Result<GradCheck>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let tape = Tape::with_branch_tracking();
    let x = tape.leaf(input.clone());
    let y = f(x)?;
    let value = y.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("grad_check function returned {value}")));
    }
    let analytic = tape.backward(y)?.wrt(x);
    let signature = tape.branch_signature();

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let base = input.data();
    for &i in entries {
        let probe = |delta: f64| {
            let mut data = base.to_vec();
            data[i] += delta;
            evaluate(f, Tensor::from_parts(input.shape().to_vec(), data))
        };
        let (plus, sig_plus) = probe(epsilon)?;
        let (minus, sig_minus) = probe(-epsilon)?;
        if sig_plus != signature || sig_minus != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
