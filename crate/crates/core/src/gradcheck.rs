//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scalar-valued tensor program over one or more inputs.
pub trait Program: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> Program for F {}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Per-input cap on the number of checked coordinates; `None` checks
    /// every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Skip coordinates whose `±step` probes change a piecewise decision
    /// (see [`Tape::branch_signature`]); central differences are invalid
    /// across a kink.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a kink.
    pub skipped: usize,
}

/// Max relative error `|a − n| / max(1, |a|, |n|)` between the tape
/// gradient and a central difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(x),
        GradCheckOptions {
            step: h,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_error)
}

pub fn grad_check_many<F: Program>(
    f: F,
    inputs: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (analytic, base_signature) = analytic_grads(&f, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        skipped: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig;
            if opts.skip_kinks && (sig_plus != base_signature || sig_minus != base_signature) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, c);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn evaluate<F: Program>(f: &F, inputs: &[Tensor]) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((scalar_of(&tape, out)?, tape.branch_signature()))
}

fn analytic_grads<F: Program>(f: &F, inputs: &[Tensor]) -> Result<(Vec<Vec<f64>>, u64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((grads, tape.branch_signature()))
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check program must be scalar-valued, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
