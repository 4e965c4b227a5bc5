use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Aggregation, ModelSpec, MAX_SCALES};
use crate::pyramid::Fusion;

/// Training and evaluation settings. Serialized as a flat JSON object;
/// missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "K_train")]
    pub k_train: usize,
    #[serde(rename = "K_eval")]
    pub k_eval: usize,
    pub scales: usize,
    pub fusion: Fusion,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub lambda_wd: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub enable_interactive: bool,
    pub enable_divergence: bool,
    pub dropout: f64,
    pub aggregation: Aggregation,
    /// Frames generated per clip; training samples `K_train` of them.
    pub clip_len: usize,
    pub eval_clips: usize,
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_train: 3,
            k_eval: 8,
            scales: 3,
            fusion: Fusion::Multiplication,
            lr: 0.003,
            lr_decay: 0.1,
            decay_every: 800,
            momentum: 0.9,
            lambda_wd: 4e-5,
            beta: 1e-4,
            gamma: 1e-4,
            batch: 16,
            iterations: 2000,
            seed: 7,
            enable_interactive: true,
            enable_divergence: true,
            dropout: 0.0,
            aggregation: Aggregation::Attention,
            clip_len: 8,
            eval_clips: 300,
            metrics_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.k_train == 0 || self.k_eval == 0 {
            return bad("K_train and K_eval must be at least 1".into());
        }
        if self.clip_len < self.k_train {
            return bad(format!(
                "clip_len {} cannot hold {} segments",
                self.clip_len, self.k_train
            ));
        }
        if !(1..=MAX_SCALES).contains(&self.scales) {
            return bad(format!("scales must be in 1..={MAX_SCALES}"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [
            ("lambda_wd", self.lambda_wd),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch == 0 || self.decay_every == 0 || self.metrics_every == 0 {
            return bad("batch, decay_every and metrics_every must be positive".into());
        }
        if self.eval_clips == 0 {
            return bad("eval_clips must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            scales: self.scales,
            fusion: self.fusion,
            aggregation: self.aggregation,
        }
    }

    /// Weights with disabled auxiliary terms zeroed.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_wd: self.lambda_wd,
            beta: if self.enable_interactive {
                self.beta
            } else {
                0.0
            },
            gamma: if self.enable_divergence {
                self.gamma
            } else {
                0.0
            },
        }
    }

    /// Learning rate in effect at zero-based iteration `it`.
    pub fn learning_rate(&self, it: usize) -> f64 {
        self.lr * self.lr_decay.powi((it / self.decay_every) as i32)
    }
}
