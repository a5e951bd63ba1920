//! Central finite-difference verification of the backward rules.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of scalar `f` against central differences
/// `(f(x + eps) - f(x - eps)) / 2eps` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check(&f, inputs, eps, &all)
}

/// Like [`grad_check`] but probes at most `per_input` randomly chosen
/// elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                let mut v = sample(&mut rng, t.len(), per_input).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check(&f, inputs, eps, &picks)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn check<F>(f: &F, inputs: &[Tensor], eps: f64, picks: &[Vec<usize>]) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, elems) in picks.iter().enumerate() {
        for &e in elems {
            let orig = probe[i].data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = evaluate(f, &probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = evaluate(f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
