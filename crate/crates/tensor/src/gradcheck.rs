//! Central finite-difference gradient checking.
//!
//! Uses the five-point central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, whose O(h⁴) truncation
//! error allows a step large enough to keep f64 round-off far below the
//! comparison tolerance.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum relative error `|a − n| / max(|a|, |n|)`.
    pub rel: f64,
    /// Below this magnitude both gradients count as zero ...
    pub tiny: f64,
    /// ... and only need to agree to this absolute error.
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-4,
            rel: 1e-4,
            tiny: 1e-6,
            abs: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: Vec<Mismatch>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], tol: Tolerance, f: F) -> Result<Report>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        out.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for index in 0..input.numel() {
            let orig = input.data()[index];
            let mut at = |offset: f64| -> Result<f64> {
                probe[which].data_mut()[index] = orig + offset;
                eval(&probe)
            };
            let h = tol.step;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            probe[which].data_mut()[index] = orig;

            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            let a = analytic[which].data()[index];
            let scale = a.abs().max(numeric.abs());
            let diff = (a - numeric).abs();
            let ok = if scale < tol.tiny {
                diff < tol.abs
            } else {
                let rel = diff / scale;
                report.max_rel = report.max_rel.max(rel);
                rel < tol.rel
            };
            report.checked += 1;
            if !ok {
                report.failures.push(Mismatch {
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R`, turning any output into a
/// scalar whose gradient exercises every output element.
pub fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = out.shape();
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = out.tape().constant(weights);
    Ok(out.mul(w)?.sum())
}

/// Deterministic uniform tensor for test inputs.
pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}
