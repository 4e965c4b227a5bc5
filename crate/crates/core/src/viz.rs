//! Salient receptive fields: maps attention columns back to
//! `(frame, w, h)`, thresholds row-max-rescaled scores and writes graymap
//! overlays plus a JSON dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SalientBox;
use crate::error::{Error, Result};
use crate::pyramid::FrameGrid;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SalienceMode {
    /// Output slot `(0, 0)` against every position of every frame.
    PerFrame,
    /// Every output slot against the positions of frame 0.
    PerPosition,
}

/// `(m, k, w, h, score_raw, score_rescaled)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SalienceEntry(pub usize, pub usize, pub usize, pub usize, pub f64, pub f64);

impl SalienceEntry {
    pub fn slot(&self) -> usize {
        self.0
    }
    pub fn frame(&self) -> usize {
        self.1
    }
    pub fn position(&self) -> (usize, usize) {
        (self.2, self.3)
    }
    pub fn raw(&self) -> f64 {
        self.4
    }
    pub fn rescaled(&self) -> f64 {
        self.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub threshold: f64,
    pub mode: SalienceMode,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<SalienceEntry>,
}

impl SalienceReport {
    pub fn grid(&self) -> FrameGrid {
        FrameGrid {
            frames: self.frames,
            width: self.width,
            height: self.height,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Inverse of the flattening `p = k·(W·H) + w·H + h`.
pub fn column_to_position(p: usize, grid: FrameGrid) -> Result<(usize, usize, usize)> {
    grid.unflatten(p)
}

pub fn extract_salient_fields(
    attention: &Tensor,
    grid: FrameGrid,
    threshold: f64,
    mode: SalienceMode,
) -> Result<SalienceReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let (d, p) = attention.dims2()?;
    if p != grid.positions() || d != grid.cells() {
        return Err(Error::dim(
            "extract_salient_fields",
            attention.shape(),
            &[grid.cells(), grid.positions()],
        ));
    }
    let (rows, cols) = match mode {
        SalienceMode::PerFrame => (0..1, 0..p),
        SalienceMode::PerPosition => (0..d, 0..grid.cells()),
    };
    let mut entries = Vec::new();
    for m in rows {
        let row = attention.row(m);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            continue;
        }
        for c in cols.clone() {
            let rescaled = row[c] / max;
            if rescaled > threshold {
                let (k, w, h) = grid.unflatten(c)?;
                entries.push(SalienceEntry(m, k, w, h, row[c], rescaled));
            }
        }
    }
    Ok(SalienceReport {
        threshold,
        mode,
        frames: grid.frames,
        width: grid.width,
        height: grid.height,
        entries,
    })
}

/// Input pixel at the center of top-level cell `(w, h)`.
pub fn receptive_center(w: usize, h: usize, stride: usize) -> (usize, usize) {
    (w * stride + stride / 2, h * stride + stride / 2)
}

/// Binary graymap (`P5`, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{height} {width}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Frame `k` of a `K×W×H×1` tensor as 8-bit pixels, with a 3×3 stamp at
/// the receptive-field center of every report entry on that frame.
pub fn render_frame(report: &SalienceReport, frames: &Tensor, k: usize, stride: usize) -> Vec<u8> {
    let (w, h) = (frames.shape()[1], frames.shape()[2]);
    let inner = w * h;
    let mut px: Vec<u8> = frames.data()[k * inner..(k + 1) * inner]
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    for e in report.entries.iter().filter(|e| e.frame() == k) {
        let (cw, ch) = receptive_center(e.2, e.3, stride);
        for r in cw.saturating_sub(1)..=(cw + 1).min(w - 1) {
            for c in ch.saturating_sub(1)..=(ch + 1).min(h - 1) {
                px[r * h + c] = 255;
            }
        }
    }
    px
}

/// Writes `frame_<k>.pgm` for every frame and `salience.json`.
pub fn emit_heatmaps(
    report: &SalienceReport,
    frames: &Tensor,
    stride: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (frames.shape()[1], frames.shape()[2]);
    let mut written = Vec::new();
    for k in 0..frames.shape()[0] {
        let path = dir.join(format!("frame_{k}.pgm"));
        let px = render_frame(report, frames, k, stride);
        std::fs::write(&path, encode_pgm(w, h, &px)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join("salience.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Mean over output slots of the fraction of each row's attention mass
/// whose top-level cell footprint overlaps the frame's box. Each position
/// spreads its mass uniformly over its `stride×stride` pixel footprint, so
/// uniform attention scores exactly the box-area ratio.
pub fn attention_mass_in_boxes(
    attention: &Tensor,
    grid: FrameGrid,
    boxes: &[SalientBox],
    stride: usize,
) -> Result<f64> {
    let (d, p) = attention.dims2()?;
    if p != grid.positions() || boxes.len() != grid.frames {
        return Err(Error::dim(
            "attention_mass_in_boxes",
            attention.shape(),
            &[grid.positions(), boxes.len()],
        ));
    }
    let overlap: Vec<f64> = (0..p)
        .map(|c| {
            let (k, w, h) = grid.unflatten(c).expect("in range");
            let b = boxes[k];
            let ow = overlap_1d(w * stride, (w + 1) * stride, b.w0, b.w1);
            let oh = overlap_1d(h * stride, (h + 1) * stride, b.h0, b.h1);
            (ow * oh) as f64 / (stride * stride) as f64
        })
        .collect();
    let mut total = 0.0;
    for m in 0..d {
        let row = attention.row(m);
        let mass: f64 = row.iter().sum();
        let inside: f64 = row.iter().zip(&overlap).map(|(a, o)| a * o).sum();
        total += inside / mass;
    }
    Ok(total / d as f64)
}

fn overlap_1d(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Mean box area over frame area.
pub fn chance_ratio(boxes: &[SalientBox], frame_w: usize, frame_h: usize) -> f64 {
    let area: usize = boxes.iter().map(SalientBox::area).sum();
    area as f64 / (boxes.len() * frame_w * frame_h) as f64
}
