//! Browser bindings: a small training session, attention overlays for
//! synthetic clips and the PCA descent curve.

use wasm_bindgen::prelude::*;

use istpa::config::TrainConfig;
use istpa::data::{corpus_clip, Split, FRAME_SIZE};
use istpa::pca::{random_instance, verify_attention_vs_pca, DescentBudget, ORACLE_TOP_EIGENVALUE};
use istpa::trainer::{argmax, uniform_sample, Trainer};
use istpa::viz::{extract_salient_fields, render_frame, SalienceMode};

fn js(e: istpa::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A reduced training run that the page advances a few steps at a time.
#[wasm_bindgen]
pub struct Session {
    trainer: Trainer,
    last_loss: f64,
    last_accuracy: f64,
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, batch: u32) -> Result<Session, JsError> {
        let config = TrainConfig {
            seed: seed as u64,
            batch: batch.max(1) as usize,
            ..TrainConfig::default()
        };
        Ok(Session {
            trainer: Trainer::new(config).map_err(js)?,
            last_loss: f64::NAN,
            last_accuracy: f64::NAN,
        })
    }

    /// Runs `n` SGD steps and returns the mean total loss over them.
    pub fn train(&mut self, n: u32) -> Result<f64, JsError> {
        let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
        for _ in 0..n {
            let s = self.trainer.step().map_err(js)?;
            loss += s.loss.total;
            correct += s.correct;
            seen += s.batch;
        }
        if n > 0 {
            self.last_loss = loss / n as f64;
            self.last_accuracy = correct as f64 / seen as f64;
        }
        Ok(self.last_loss)
    }

    pub fn iteration(&self) -> u32 {
        self.trainer.iteration() as u32
    }

    /// Training accuracy over the last `train` call.
    pub fn accuracy(&self) -> f64 {
        self.last_accuracy
    }

    /// Eval clip `index` as `K` grayscale frames laid side by side
    /// (`32·K` wide, 32 high, row-major bytes), with a 3×3 mark on every
    /// position whose rescaled attention exceeds `threshold`.
    pub fn overlay(&self, index: u32, threshold: f64) -> Result<Overlay, JsError> {
        let cfg = &self.trainer.config;
        let clip = corpus_clip(cfg.seed, Split::Eval, index as u64, cfg.clip_len).map_err(js)?;
        let clip = clip.select_frames(&uniform_sample(clip.len(), cfg.k_eval));
        let model = &self.trainer.model;
        let (a, grid, logits) = model.inspect(&clip.frames).map_err(js)?;
        let report =
            extract_salient_fields(&a, grid, threshold, SalienceMode::PerFrame).map_err(js)?;
        let k = clip.len();
        let stride = FRAME_SIZE / grid.width;
        let width = FRAME_SIZE * k;
        let mut pixels = vec![0u8; width * FRAME_SIZE];
        for f in 0..k {
            let px = render_frame(&report, &clip.frames, f, stride);
            // Frames are stored with the first axis as rows.
            for r in 0..FRAME_SIZE {
                let dst = r * width + f * FRAME_SIZE;
                pixels[dst..dst + FRAME_SIZE]
                    .copy_from_slice(&px[r * FRAME_SIZE..(r + 1) * FRAME_SIZE]);
            }
        }
        Ok(Overlay {
            width: width as u32,
            height: FRAME_SIZE as u32,
            pixels,
            label: clip.label as u32,
            predicted: argmax(&logits) as u32,
            marked: report.entries.len() as u32,
        })
    }
}

#[wasm_bindgen]
pub struct Overlay {
    pub width: u32,
    pub height: u32,
    pixels: Vec<u8>,
    pub label: u32,
    pub predicted: u32,
    pub marked: u32,
}

#[wasm_bindgen]
impl Overlay {
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
}

/// Loss curve of projected gradient descent on the interaction loss for a
/// random `p×c` instance, followed by the PCA optimum as the last element.
#[wasm_bindgen]
pub fn pca_curve(seed: u32, p: u32, c: u32, d: u32, steps: u32) -> Result<Vec<f64>, JsError> {
    let (p, d) = (p.max(1) as usize, d.max(1) as usize);
    let x =
        random_instance(seed as u64, p, c.max(1) as usize, ORACLE_TOP_EIGENVALUE).map_err(js)?;
    let budget = DescentBudget {
        steps: steps as usize,
        seed: seed as u64,
        ..Default::default()
    };
    let v = verify_attention_vs_pca(&x, d.min(p), budget).map_err(js)?;
    let mut curve = v.curve;
    curve.push(v.target);
    Ok(curve)
}
