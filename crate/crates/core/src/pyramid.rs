//! Multi-scale channel attention over spatio-temporal feature pyramids.
//!
//! Each level `F_j: K×W_j×H_j×C_j` is max-pooled to the top level's
//! spatial extent and flattened to `X_j: (K·W·H)×C_j`. A per-level linear
//! map scores every channel vector against `d = W·H` output slots, the
//! level scores are fused pointwise, softmaxed along positions, L2
//! normalized, and finally used to aggregate the top level's channel
//! vectors into a `W×H×C` attention map. Parameter shapes depend only on
//! the chosen levels, never on the frame count `K`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Combine, Tape, Var, L2_EPSILON};
use crate::tensor::Tensor;

pub type Fusion = Combine;

/// Frame count and spatial extent shared by every resized level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl FrameGrid {
    pub fn positions(&self) -> usize {
        self.frames * self.width * self.height
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Flat row index of `(frame, w, h)` in `X_j`.
    pub fn flatten(&self, frame: usize, w: usize, h: usize) -> usize {
        frame * self.cells() + w * self.height + h
    }

    pub fn unflatten(&self, p: usize) -> Result<(usize, usize, usize)> {
        if p >= self.positions() {
            return Err(Error::Contract(format!(
                "position {p} out of range for {} positions",
                self.positions()
            )));
        }
        let frame = p / self.cells();
        let rem = p % self.cells();
        Ok((frame, rem / self.height, rem % self.height))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PyramidLevel {
    /// `F_j`, `K×W_j×H_j×C_j`.
    pub features: Var,
    /// `f'_j`, `K×W×H×C_j`; identical to `features` on the top level.
    pub resized: Var,
    /// `X_j`, `(K·W·H)×C_j`.
    pub flattened: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    /// `d×C_j`.
    pub weight: Tensor,
    /// `d`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub levels: Vec<LevelParams>,
    pub fusion: Fusion,
    pub d: usize,
}

impl AttentionLayerParams {
    /// Zero-mean uniform weights with half-width `sqrt(6/(d+C_j))`, zero
    /// biases. `d` is the top level's `W·H`.
    pub fn init<R: Rng + ?Sized>(
        channels: &[usize],
        top: (usize, usize),
        fusion: Fusion,
        rng: &mut R,
    ) -> Self {
        let d = top.0 * top.1;
        let levels = channels
            .iter()
            .map(|&c| LevelParams {
                weight: Tensor::uniform(&[d, c], (6.0 / (d + c) as f64).sqrt(), rng),
                bias: Tensor::zeros(&[d]),
            })
            .collect();
        Self { levels, fusion, d }
    }

    /// `Σ_j d·C_j + d·N`.
    pub fn param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let (weights, biases) = self
            .levels
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .unzip();
        AttentionVars {
            weights,
            biases,
            fusion: self.fusion,
        }
    }
}

/// Attention parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub fusion: Fusion,
}

#[derive(Debug, Clone)]
pub struct FusedScores {
    /// `softmax_rows(F(Y_1..Y_N))` before L2 normalization.
    pub softmax: Var,
    /// `A`, the L2-normalized attention matrix.
    pub attention: Var,
    /// `softmax_rows(Y_j)` per level.
    pub level_softmax: Vec<Var>,
    pub degenerate_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AttentionForwardRecord {
    pub grid: FrameGrid,
    pub levels: Vec<PyramidLevel>,
    /// `Y_j`, `d×(K·W·H)`.
    pub raw_scores: Vec<Var>,
    pub level_softmax: Vec<Var>,
    pub fused_softmax: Var,
    /// `A`, `d×(K·W·H)`.
    pub attention: Var,
    /// `M`, `d×C`.
    pub aggregated: Var,
    /// `M'`, `W×H×C`.
    pub attention_map: Var,
    pub degenerate_rows: Vec<usize>,
}

/// Resizes every level to the top (last) level's extent and flattens it.
pub fn build_pyramid(tape: &mut Tape, features: &[Var]) -> Result<(Vec<PyramidLevel>, FrameGrid)> {
    let top = *features
        .last()
        .ok_or_else(|| Error::Contract("pyramid needs at least one level".into()))?;
    let top_shape = level_shape(tape, top)?;
    let grid = FrameGrid {
        frames: top_shape[0],
        width: top_shape[1],
        height: top_shape[2],
    };
    let mut levels = Vec::with_capacity(features.len());
    for (j, &f) in features.iter().enumerate() {
        let shape = level_shape(tape, f)?;
        if shape[0] != grid.frames || shape[1] < grid.width || shape[2] < grid.height {
            return Err(Error::dim("build_pyramid", &shape, &top_shape));
        }
        let resized = if j + 1 == features.len() {
            f
        } else {
            tape.adaptive_max_pool2d(f, (grid.width, grid.height))?
        };
        let flattened = tape.reshape(resized, &[grid.positions(), shape[3]])?;
        levels.push(PyramidLevel {
            features: f,
            resized,
            flattened,
        });
    }
    Ok((levels, grid))
}

fn level_shape(tape: &Tape, v: Var) -> Result<[usize; 4]> {
    match *tape.shape(v) {
        [k, w, h, c] => Ok([k, w, h, c]),
        ref other => Err(Error::dim("pyramid level", other, &[4])),
    }
}

/// `Y_j = W_j·X_jᵀ` with `b_j` added to every column.
pub fn compute_level_scores(
    tape: &mut Tape,
    level: &PyramidLevel,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (_, c) = tape.value(level.flattened).dims2()?;
    let (d, wc) = tape.value(weight).dims2()?;
    if wc != c || tape.value(bias).numel() != d {
        return Err(Error::dim(
            "compute_level_scores",
            tape.shape(level.flattened),
            tape.shape(weight),
        ));
    }
    let wt = tape.transpose(weight)?;
    let scores_t = tape.affine(level.flattened, wt, bias)?;
    tape.transpose(scores_t)
}

pub fn fuse_and_normalize(tape: &mut Tape, scores: &[Var], fusion: Fusion) -> Result<FusedScores> {
    if scores.is_empty() {
        return Err(Error::Contract("no score matrices to fuse".into()));
    }
    let fused = tape.combine(fusion, scores)?;
    let softmax = tape.softmax_rows(fused)?;
    let (attention, degenerate_rows) = tape.l2_normalize_rows(softmax, L2_EPSILON)?;
    let level_softmax = scores
        .iter()
        .map(|&y| tape.softmax_rows(y))
        .collect::<Result<_>>()?;
    Ok(FusedScores {
        softmax,
        attention,
        level_softmax,
        degenerate_rows,
    })
}

/// `M = A·X` and its row-major reshape `M'` (row `m = w·H + h`).
pub fn aggregate(tape: &mut Tape, attention: Var, top: Var, grid: FrameGrid) -> Result<(Var, Var)> {
    let (d, p) = tape.value(attention).dims2()?;
    let (rows, c) = tape.value(top).dims2()?;
    if p != rows || d != grid.cells() {
        return Err(Error::dim(
            "aggregate",
            tape.shape(attention),
            tape.shape(top),
        ));
    }
    let m = tape.matmul(attention, top)?;
    let m_map = tape.reshape(m, &[grid.width, grid.height, c])?;
    Ok((m, m_map))
}

pub fn attention_forward(
    tape: &mut Tape,
    features: &[Var],
    params: &AttentionVars,
) -> Result<AttentionForwardRecord> {
    if features.len() != params.weights.len() {
        return Err(Error::dim(
            "attention_forward levels",
            &[features.len()],
            &[params.weights.len()],
        ));
    }
    let (levels, grid) = build_pyramid(tape, features)?;
    let raw_scores = levels
        .iter()
        .zip(params.weights.iter().zip(&params.biases))
        .map(|(level, (&w, &b))| compute_level_scores(tape, level, w, b))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_and_normalize(tape, &raw_scores, params.fusion)?;
    let top = levels.last().expect("non-empty").flattened;
    let (aggregated, attention_map) = aggregate(tape, fused.attention, top, grid)?;
    Ok(AttentionForwardRecord {
        grid,
        levels,
        raw_scores,
        level_softmax: fused.level_softmax,
        fused_softmax: fused.softmax,
        attention: fused.attention,
        aggregated,
        attention_map,
        degenerate_rows: fused.degenerate_rows,
    })
}

/// Reorders the leading (frame) axis: output frame `i` is input frame
/// `perm[i]`.
pub fn permute_frames(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let frames = t.shape()[0];
    if perm.len() != frames {
        return Err(Error::dim("permute_frames", t.shape(), &[perm.len()]));
    }
    let inner = t.numel() / frames;
    let mut out = Vec::with_capacity(t.numel());
    for &src in perm {
        out.extend_from_slice(&t.data()[src * inner..(src + 1) * inner]);
    }
    Tensor::new(t.shape(), out)
}
