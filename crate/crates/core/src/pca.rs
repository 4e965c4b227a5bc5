//! Covariance eigenbasis via cyclic Jacobi rotations, used to check the
//! interaction loss against principal component analysis.
//!
//! For `X: P×C`, the rows of the returned basis are the top-`d` unit
//! eigenvectors of the `P×P` matrix `X·Xᵀ`. No centering is applied.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::interactive_loss;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const MAX_ORACLE_EXTENT: usize = 64;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Eigenvalue gaps below this make the retained subspace non-unique.
pub const DEGENERACY_GAP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    /// `d×P`, orthonormal rows.
    pub basis: Tensor,
    /// Top-`d` eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Full spectrum, descending.
    pub spectrum: Vec<f64>,
    /// True when some gap among the leading `d+1` eigenvalues is below
    /// [`DEGENERACY_GAP`].
    pub degenerate: bool,
}

/// Symmetric eigendecomposition; returns (eigenvalues, eigenvectors as
/// columns of a row-major `n×n` buffer), unsorted.
pub fn jacobi_eigen(sym: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off < OFF_DIAGONAL_TOL {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// `X·Xᵀ` as a row-major `P×P` buffer.
pub fn gram(x: &Tensor) -> Result<Vec<f64>> {
    let (p, c) = x.dims2()?;
    let d = x.data();
    let mut g = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            g[i * p + j] = (0..c).map(|t| d[i * c + t] * d[j * c + t]).sum();
        }
    }
    Ok(g)
}

pub fn covariance_eigenbasis(x: &Tensor, d: usize) -> Result<PcaBasis> {
    let (p, _) = x.dims2()?;
    if d == 0 || d > p {
        return Err(Error::Contract(format!(
            "basis size {d} must be in 1..={p}"
        )));
    }
    if p > MAX_ORACLE_EXTENT {
        return Err(Error::Contract(format!(
            "oracle limited to P <= {MAX_ORACLE_EXTENT}, got {p}"
        )));
    }
    let (values, vectors) = jacobi_eigen(&gram(x)?, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut rows = Vec::with_capacity(d * p);
    for &col in &order[..d] {
        rows.extend((0..p).map(|r| vectors[r * p + col]));
    }
    let scale = spectrum[0].abs().max(1.0);
    let degenerate = spectrum[..(d + 1).min(p)]
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() < DEGENERACY_GAP * scale);
    Ok(PcaBasis {
        basis: Tensor::new(&[d, p], rows)?,
        eigenvalues: spectrum[..d].to_vec(),
        spectrum,
        degenerate,
    })
}

/// `tr(S·X·Xᵀ·Sᵀ)`.
pub fn pca_trace(basis: &PcaBasis, x: &Tensor) -> Result<f64> {
    let (d, p) = basis.basis.dims2()?;
    let (rows, c) = x.dims2()?;
    if p != rows {
        return Err(Error::dim("pca_trace", basis.basis.shape(), x.shape()));
    }
    let s = basis.basis.data();
    let xd = x.data();
    let mut trace = 0.0;
    for m in 0..d {
        for t in 0..c {
            let proj: f64 = (0..p).map(|k| s[m * p + k] * xd[k * c + t]).sum();
            trace += proj * proj;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentBudget {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DescentBudget {
    fn default() -> Self {
        Self {
            steps: 4000,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaVerification {
    pub final_loss: f64,
    /// `−tr(S·X·Xᵀ·Sᵀ)` for the oracle basis.
    pub target: f64,
    pub relative_gap: f64,
    pub degenerate: bool,
    /// Mean squared cosine between the learned rows' span and the oracle
    /// subspace; absent for degenerate spectra.
    pub subspace_alignment: Option<f64>,
    pub passed: bool,
    pub note: String,
    /// Loss after every step (step 0 is the initial value).
    pub curve: Vec<f64>,
}

pub const PCA_RELATIVE_TOLERANCE: f64 = 0.05;

/// Gradient descent on the interaction loss over a free `d×P` matrix whose
/// rows are re-normalized after each step, compared with the oracle trace.
pub fn verify_attention_vs_pca(
    x: &Tensor,
    d: usize,
    budget: DescentBudget,
) -> Result<PcaVerification> {
    let (p, _) = x.dims2()?;
    let oracle = covariance_eigenbasis(x, d)?;
    let target = -pca_trace(&oracle, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut a = Tensor::randn(&[d, p], &mut rng);
    normalize_rows(&mut a);
    let mut curve = Vec::with_capacity(budget.steps + 1);
    let mut loss = 0.0;
    for step in 0..=budget.steps {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let xv = tape.constant(x.clone());
        let out = interactive_loss(&mut tape, av, xv)?;
        loss = tape.scalar_value(out);
        curve.push(loss);
        if step == budget.steps {
            break;
        }
        tape.backward(out)?;
        let g = tape.grad(av).expect("leaf gradient");
        for (w, gv) in a.data_mut().iter_mut().zip(g) {
            *w -= budget.learning_rate * gv;
        }
        normalize_rows(&mut a);
    }
    let relative_gap = (loss - target).abs() / target.abs().max(f64::MIN_POSITIVE);
    let (subspace_alignment, note) = if oracle.degenerate {
        (
            None,
            "degenerate spectrum: eigenvectors not unique, traces compared only".to_string(),
        )
    } else {
        (Some(subspace_alignment(&a, &oracle.basis)), String::new())
    };
    let passed = relative_gap <= PCA_RELATIVE_TOLERANCE || (target == 0.0 && loss.abs() < 1e-9);
    let note = if passed || !note.is_empty() {
        note
    } else {
        format!("descent did not converge within {} steps", budget.steps)
    };
    Ok(PcaVerification {
        final_loss: loss,
        target,
        relative_gap,
        degenerate: oracle.degenerate,
        subspace_alignment,
        passed,
        note,
        curve,
    })
}

fn normalize_rows(a: &mut Tensor) {
    let cols = a.shape()[1];
    for row in a.data_mut().chunks_exact_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// `‖S·Q‖²_F / d` where `Q` spans the rows of `a` (orthonormalized).
fn subspace_alignment(a: &Tensor, basis: &Tensor) -> f64 {
    let q = orthonormal_rows(a);
    let (d, p) = (q.shape()[0], q.shape()[1]);
    let mut total = 0.0;
    for i in 0..basis.shape()[0] {
        for j in 0..d {
            let c: f64 = (0..p).map(|k| basis.at2(i, k) * q.at2(j, k)).sum();
            total += c * c;
        }
    }
    total / basis.shape()[0] as f64
}

/// Modified Gram-Schmidt on the rows; dependent rows are dropped.
pub fn orthonormal_rows(a: &Tensor) -> Tensor {
    let (d, p) = (a.shape()[0], a.shape()[1]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    for r in 0..d {
        let mut v = a.row(r).to_vec();
        for q in &rows {
            let c: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    let k = rows.len().max(1);
    let mut data: Vec<f64> = rows.into_iter().flatten().collect();
    data.resize(k * p, 0.0);
    Tensor::new(&[k, p], data).expect("consistent shape")
}

/// Random `P×C` Gaussian instance rescaled so the largest eigenvalue of
/// `X·Xᵀ` equals `top_eigenvalue`.
///
/// The orthogonality penalty only pins the minimizer to the principal
/// subspace when eigenvalue spreads are small next to 1, so oracle
/// instances are drawn at a small spectral scale.
pub fn random_instance(seed: u64, p: usize, c: usize, top_eigenvalue: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[p, c], &mut rng);
    let top = covariance_eigenbasis(&x, 1)?.eigenvalues[0];
    let s = (top_eigenvalue / top).sqrt();
    x.data_mut().iter_mut().for_each(|v| *v *= s);
    Ok(x)
}

/// Default spectral scale for [`random_instance`].
pub const ORACLE_TOP_EIGENVALUE: f64 = 0.1;
