//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{Bound, ParameterStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Structurally zero
    /// gradients (e.g. biases under a softmax shift) have central differences
    /// of order `ε_mach·|loss|/step ≈ 1e-11`, which must not count as failures.
    pub floor: f64,
    /// Check at most this many (seeded, random) elements per parameter.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParameterStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let bound = store.bind(&mut tape, false);
    let out = loss(&mut tape, &bound)?;
    tape.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Compares analytic gradients of `loss` with central differences for every
/// parameter in `store`. The closure must be deterministic (fixed dropout
/// masks and noise).
pub fn gradient_check<F>(store: &ParameterStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let first = evaluate(store, &loss)?;
    let second = evaluate(store, &loss)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = loss(&mut tape, &bound)?;
    let analytic = tape.backward(out)?.params();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for (name, value) in store.iter() {
        let n = value.len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = &analytic[name];
        for idx in indices {
            let mut plus = store.clone();
            let mut p = value.clone();
            p.data_mut()[idx] += opts.step;
            plus.set(name, p)?;
            let mut minus = store.clone();
            let mut q = value.clone();
            q.data_mut()[idx] -= opts.step;
            minus.set(name, q)?;
            let numeric = (evaluate(&plus, &loss)? - evaluate(&minus, &loss)?) / (2.0 * opts.step);
            let a = grad.data()[idx];
            let rel = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    param: name.to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}
