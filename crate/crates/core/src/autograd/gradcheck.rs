//! Central finite-difference gradient checking on a 64-bit shadow computation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    #[default]
    ThreePoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    pub stencil: Stencil,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Relative errors are normalized by `max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_fraction · max |numeric|` over the checked inputs.
    pub floor_fraction: f64,
    /// Check at most this many coordinates per input (sampled), or all.
    pub max_coords_per_input: Option<usize>,
    /// Seeds the output projection and coordinate sampling.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            stencil: Stencil::ThreePoint,
            tolerance: 1e-4,
            floor_fraction: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crossed an activation kink or
    /// changed a pooling argmax.
    pub skipped: usize,
    pub non_finite: bool,
    /// Set when the objective itself failed to evaluate.
    pub error: Option<String>,
    pub pass: bool,
}

type Objective<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Reduces a non-scalar output to `Σ out ⊙ r` with a fixed pseudo-random `r`.
fn scalarize(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))?;
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn evaluate(f: &Objective, inputs: &[Tensor<f64>], seed: u64) -> Result<(f64, u64)> {
    let mut tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, seed)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape.kink_signature().unwrap_or_default()))
}

/// Reverse-mode gradients of the (scalarized) objective with respect to each input.
pub fn analytic_gradients<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, opts.seed)?;
    let grads = tape.backward(loss)?;
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.get(v) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(t.shape().to_vec()),
        })
        .collect()
}

/// Which coordinates of each input are checked.
fn coordinates(inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    inputs
        .iter()
        .map(|t| match opts.max_coords_per_input {
            Some(k) if k < t.len() => {
                let mut idx = sample(&mut rng, t.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..t.len()).collect(),
        })
        .collect()
}

/// Central differences per checked coordinate; `None` marks a skipped
/// (kink-straddling) coordinate.
pub fn numeric_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradcheckOptions,
) -> Result<Vec<Vec<(usize, Option<f64>)>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, base_sig) = evaluate(&f, inputs, opts.seed)?;
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, coords) in coordinates(inputs, opts).into_iter().enumerate() {
        let mut col = Vec::with_capacity(coords.len());
        for j in coords {
            let orig = work[i].data()[j];
            let mut at = |offset: f64| -> Result<Option<f64>> {
                work[i].data_mut()[j] = orig + offset;
                let (value, sig) = evaluate(&f, &work, opts.seed)?;
                Ok((sig == base_sig).then_some(value))
            };
            let h = opts.eps;
            let estimate = match opts.stencil {
                Stencil::ThreePoint => match (at(h)?, at(-h)?) {
                    (Some(p), Some(m)) => Some((p - m) / (2.0 * h)),
                    _ => None,
                },
                Stencil::FivePoint => match (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?) {
                    (Some(p2), Some(p1), Some(m1), Some(m2)) => {
                        Some((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
                    }
                    _ => None,
                },
            };
            work[i].data_mut()[j] = orig;
            col.push((j, estimate));
        }
        out.push(col);
    }
    Ok(out)
}

/// Compares analytic gradients to numeric ones at the numeric coordinates.
pub fn compare_gradients(
    analytic: &[Tensor<f64>],
    numeric: &[Vec<(usize, Option<f64>)>],
    opts: &GradcheckOptions,
) -> GradcheckReport {
    let scale = numeric
        .iter()
        .flatten()
        .filter_map(|(_, n)| *n)
        .map(f64::abs)
        .fold(0.0, f64::max);
    let floor = (opts.floor_fraction * scale).max(f64::MIN_POSITIVE);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        non_finite: false,
        error: None,
        pass: false,
    };
    for (a, col) in analytic.iter().zip(numeric) {
        for &(j, n) in col {
            let Some(n) = n else {
                report.skipped += 1;
                continue;
            };
            let a = a.data()[j];
            if !a.is_finite() || !n.is_finite() {
                report.non_finite = true;
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report.pass = !report.non_finite && report.checked > 0 && report.max_rel_err < opts.tolerance;
    report
}

/// Full check of `f` at `inputs`. Evaluation errors (shape errors, non-finite
/// values) come back as a failed report rather than a panic.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let failed = |non_finite: bool, error: Option<String>| GradcheckReport {
        max_rel_err: f64::INFINITY,
        checked: 0,
        skipped: 0,
        non_finite,
        error,
        pass: false,
    };
    if inputs.iter().any(|t| !t.all_finite()) {
        return failed(true, None);
    }
    let run = || -> Result<GradcheckReport> {
        let analytic = analytic_gradients(&f, inputs, opts)?;
        let numeric = numeric_gradients(&f, inputs, opts)?;
        Ok(compare_gradients(&analytic, &numeric, opts))
    };
    match run() {
        Ok(r) => r,
        Err(e) => failed(false, Some(e.to_string())),
    }
}
