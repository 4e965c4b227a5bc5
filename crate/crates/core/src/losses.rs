//! Training objective: cross entropy, weight decay, the PCA-derived
//! interaction loss and the multi-scale divergence loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_wd: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_wd: 4e-5,
            beta: 1e-4,
            gamma: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub weight_decay: f64,
    pub interactive: f64,
    pub divergence: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `classification + λ·weight_decay + β·interactive + γ·divergence`.
    pub fn compose(&self, w: &LossWeights) -> f64 {
        self.classification
            + w.lambda_wd * self.weight_decay
            + w.beta * self.interactive
            + w.gamma * self.divergence
    }
}

/// `−Σ_m (A·X·Xᵀ·Aᵀ)[m][m] + Σ_{m≠n} ((A·Aᵀ)[m][n])²`.
///
/// The diagonal sum equals `‖A·X‖²_F`, which is what gets recorded.
pub fn interactive_loss(tape: &mut Tape, a: Var, x: Var) -> Result<Var> {
    let (_, p) = tape.value(a).dims2()?;
    let (rows, _) = tape.value(x).dims2()?;
    if p != rows {
        return Err(Error::dim("interactive_loss", tape.shape(a), tape.shape(x)));
    }
    let ax = tape.matmul(a, x)?;
    let projected = tape.sum_squares(ax);
    let at = tape.transpose(a)?;
    let gram = tape.matmul(a, at)?;
    let off = tape.zero_diagonal(gram)?;
    let overlap = tape.sum_squares(off);
    tape.sub(overlap, projected)
}

/// Slack allowed on `|A − s_j|` before inputs are rejected.
const DELTA_SLACK: f64 = 1e-9;

/// `sqrt(Σ_j Σ_m Σ_k (1 − δ²))` with `δ = |A[m][k] − s_j[m][k]|`; the
/// argument is clamped at zero before the root.
pub fn divergence_loss(tape: &mut Tape, a: Var, level_scores: &[Var]) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let (d, p) = tape.value(a).dims2()?;
    if level_scores.is_empty() {
        return Err(Error::Contract(
            "divergence loss needs at least one level".into(),
        ));
    }
    let mut terms = Vec::with_capacity(level_scores.len());
    for &s in level_scores {
        if tape.shape(s) != shape.as_slice() {
            return Err(Error::dim("divergence_loss", &shape, tape.shape(s)));
        }
        let diff = tape.sub(a, s)?;
        if let Some(bad) = tape
            .value(diff)
            .data()
            .iter()
            .find(|v| v.abs() > 1.0 + DELTA_SLACK)
        {
            return Err(Error::Contract(format!(
                "attention difference {bad} outside [-1, 1]; inputs are not normalized scores"
            )));
        }
        let sq = tape.sum_squares(diff);
        let neg = tape.scale(sq, -1.0);
        terms.push(tape.add_scalar(neg, (d * p) as f64));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.sqrt_clamped(acc))
}

pub fn classification_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// `Σ_θ w_θ²` over every listed parameter.
pub fn weight_decay(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p);
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Per-sample loss terms before weighting. Missing auxiliary terms count
/// as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub classification: Var,
    pub interactive: Option<Var>,
    pub divergence: Option<Var>,
}

/// Composes the weighted objective. `samples` are averaged; the decay term
/// is added once.
pub fn total_loss(
    tape: &mut Tape,
    samples: &[LossTerms],
    params: &[Var],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "total_loss needs at least one sample".into(),
        ));
    }
    let inv = 1.0 / samples.len() as f64;
    let mut breakdown = LossBreakdown::default();
    let mut acc: Option<Var> = None;
    let mut push = |tape: &mut Tape, v: Var, c: f64| -> Result<()> {
        let scaled = tape.scale(v, c);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
        Ok(())
    };
    for s in samples {
        breakdown.classification += tape.scalar_value(s.classification) * inv;
        push(tape, s.classification, inv)?;
        if let Some(v) = s.interactive {
            breakdown.interactive += tape.scalar_value(v) * inv;
            if weights.beta != 0.0 {
                push(tape, v, weights.beta * inv)?;
            }
        }
        if let Some(v) = s.divergence {
            breakdown.divergence += tape.scalar_value(v) * inv;
            if weights.gamma != 0.0 {
                push(tape, v, weights.gamma * inv)?;
            }
        }
    }
    let wd = weight_decay(tape, params)?;
    breakdown.weight_decay = tape.scalar_value(wd);
    if weights.lambda_wd != 0.0 {
        push(tape, wd, weights.lambda_wd)?;
    }
    let total = acc.expect("at least one term");
    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}

/// Evaluates [`interactive_loss`] on plain tensors.
pub fn interactive_value(a: &Tensor, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (av, xv) = (tape.constant(a.clone()), tape.constant(x.clone()));
    let out = interactive_loss(&mut tape, av, xv)?;
    Ok(tape.scalar_value(out))
}

/// Evaluates [`divergence_loss`] on plain tensors.
pub fn divergence_value(a: &Tensor, level_scores: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let s: Vec<Var> = level_scores
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = divergence_loss(&mut tape, av, &s)?;
    Ok(tape.scalar_value(out))
}
