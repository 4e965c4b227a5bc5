//! Mini-batch SGD with momentum over the composed objective, plus
//! evaluation and CSV metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{corpus_clip, generate_corpus, mix64, ClipSample, Split, NUM_CLASSES};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckOptions, GradCheckReport};
use crate::losses::{
    classification_loss, divergence_loss, interactive_loss, total_loss, LossBreakdown, LossTerms,
};
use crate::model::{forward_clips, BoundModel, DropoutSampler, Model};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "iter,total,ce,wd,interactive,divergence,acc";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub accuracy: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            l.total,
            l.classification,
            l.weight_decay,
            l.interactive,
            l.divergence,
            self.accuracy
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// One contiguous segment per output frame, one random frame per segment.
pub fn segment_sample<R: Rng + ?Sized>(
    clip_len: usize,
    segments: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..segments)
        .map(|i| {
            let lo = i * clip_len / segments;
            let hi = ((i + 1) * clip_len / segments).max(lo + 1);
            rng.random_range(lo..hi)
        })
        .collect()
}

/// `k` evenly spaced frame indices (segment centers); every frame when
/// `k >= clip_len`.
pub fn uniform_sample(clip_len: usize, k: usize) -> Vec<usize> {
    if k >= clip_len {
        return (0..clip_len).collect();
    }
    (0..k).map(|i| (2 * i + 1) * clip_len / (2 * k)).collect()
}

/// Per-iteration statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub batch: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    velocity: Vec<Vec<f64>>,
    iteration: usize,
    window: Vec<StepStats>,
    metrics: Vec<MetricsRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed));
        let model = Model::init(config.model_spec(), &mut rng)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: TrainConfig, model: Model) -> Self {
        let velocity = model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            config,
            model,
            velocity,
            iteration: 0,
            window: Vec::new(),
            metrics: Vec::new(),
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Training clips of iteration `it`, with `K_train` frames each.
    pub fn batch_clips(config: &TrainConfig, it: usize) -> Result<Vec<ClipSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ mix64(it as u64 + 1)));
        (0..config.batch)
            .map(|b| {
                let clip = corpus_clip(
                    config.seed,
                    Split::Train,
                    (it * config.batch + b) as u64,
                    config.clip_len,
                )?;
                let idx = segment_sample(config.clip_len, config.k_train, &mut rng);
                Ok(clip.select_frames(&idx))
            })
            .collect()
    }

    /// Runs one SGD iteration and returns its statistics.
    pub fn step(&mut self) -> Result<StepStats> {
        let it = self.iteration;
        let cfg = &self.config;
        let clips = Self::batch_clips(cfg, it)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ 0xd0d0 ^ mix64(it as u64)));
        let dropout = (cfg.dropout > 0.0).then_some(DropoutSampler {
            rate: cfg.dropout,
            rng: &mut drop_rng,
        });
        // Features enter as data, as in PCA: −‖A·X‖² is unbounded in X.
        let (total, loss, correct) =
            batch_objective(&mut tape, &bound, &clips, cfg, dropout, true)?;
        tape.backward(total)?;

        let lr = cfg.learning_rate(it);
        let momentum = cfg.momentum;
        for ((param, vel), var) in self
            .model
            .params_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(&bound.all)
        {
            let Some(g) = tape.grad(*var) else { continue };
            momentum_update(param.data_mut(), vel, g, lr, momentum);
        }

        let stats = StepStats {
            loss,
            correct,
            batch: clips.len(),
        };
        self.iteration += 1;
        self.window.push(stats);
        if self.iteration.is_multiple_of(self.config.metrics_every) {
            self.metrics.push(summarize(self.iteration, &self.window));
            self.window.clear();
        }
        Ok(stats)
    }

    /// Runs the remaining configured iterations, calling `on_row` for each
    /// metrics row as it is produced.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let before = self.metrics.len();
            self.step()?;
            if self.metrics.len() > before {
                on_row(self.metrics.last().expect("row"));
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.config, &self.model)
    }
}

/// Records the objective for `clips` on `tape` and returns it with its
/// breakdown and the number of correctly classified clips.
///
/// With `stop_feature_grad` the interaction term treats the top-level
/// features as data, which is what training uses; without it the exact
/// composed objective is recorded.
pub fn batch_objective<R: Rng>(
    tape: &mut Tape,
    bound: &BoundModel,
    clips: &[ClipSample],
    cfg: &TrainConfig,
    dropout: Option<DropoutSampler<'_, R>>,
    stop_feature_grad: bool,
) -> Result<(Var, LossBreakdown, usize)> {
    let frames: Vec<&Tensor> = clips.iter().map(|c| &c.frames).collect();
    let outputs = forward_clips(tape, bound, &frames, dropout)?;
    let mut terms = Vec::with_capacity(clips.len());
    let mut correct = 0;
    for (clip, out) in clips.iter().zip(&outputs) {
        if argmax(tape.value(out.logits).data()) == clip.label {
            correct += 1;
        }
        let classification = classification_loss(tape, out.logits, clip.label)?;
        let (mut interactive, mut divergence) = (None, None);
        if let Some(rec) = &out.attention {
            if cfg.enable_interactive {
                let mut top = rec.levels.last().expect("levels").flattened;
                if stop_feature_grad {
                    top = tape.detach(top);
                }
                interactive = Some(interactive_loss(tape, rec.attention, top)?);
            }
            if cfg.enable_divergence {
                divergence = Some(divergence_loss(tape, rec.attention, &rec.level_softmax)?);
            }
        }
        terms.push(LossTerms {
            classification,
            interactive,
            divergence,
        });
    }
    let (total, loss) = total_loss(tape, &terms, &bound.all, &cfg.loss_weights())?;
    Ok((total, loss, correct))
}

/// `v ← μ·v − lr·g`, `w ← w + v`.
pub fn momentum_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

fn summarize(iter: usize, window: &[StepStats]) -> MetricsRow {
    let n = window.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut correct = 0;
    let mut seen = 0;
    for s in window {
        loss.total += s.loss.total / n;
        loss.classification += s.loss.classification / n;
        loss.weight_decay += s.loss.weight_decay / n;
        loss.interactive += s.loss.interactive / n;
        loss.divergence += s.loss.divergence / n;
        correct += s.correct;
        seen += s.batch;
    }
    MetricsRow {
        iter,
        loss,
        accuracy: correct as f64 / seen as f64,
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains with `config` from scratch.
pub fn train(config: &TrainConfig) -> Result<(Trainer, Checkpoint)> {
    let mut t = Trainer::new(config.clone())?;
    t.run(|_| {})?;
    let ckpt = t.checkpoint();
    Ok((t, ckpt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

const EVAL_BATCH: usize = 32;

/// Predicted class of every clip using `k` uniformly sampled frames.
pub fn predict(model: &Model, k: usize, clips: &[ClipSample]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_BATCH) {
        let sampled: Vec<ClipSample> = chunk
            .iter()
            .map(|c| c.select_frames(&uniform_sample(c.len(), k)))
            .collect();
        let frames: Vec<&Tensor> = sampled.iter().map(|c| &c.frames).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let outs = forward_clips::<ChaCha8Rng>(&mut tape, &bound, &frames, None)?;
        preds.extend(outs.iter().map(|o| argmax(tape.value(o.logits).data())));
    }
    Ok(preds)
}

pub fn evaluate(model: &Model, k: usize, clips: &[ClipSample]) -> Result<EvalReport> {
    evaluate_sharded(model, k, clips, 1)
}

/// Evaluation split across `workers` threads sharing frozen parameters.
pub fn evaluate_sharded(
    model: &Model,
    k: usize,
    clips: &[ClipSample],
    workers: usize,
) -> Result<EvalReport> {
    let workers = workers.clamp(1, clips.len().max(1));
    let preds: Vec<usize> = if workers == 1 {
        predict(model, k, clips)?
    } else {
        let chunk = clips.len().div_ceil(workers);
        let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
            let hs: Vec<_> = clips
                .chunks(chunk)
                .map(|part| s.spawn(move || predict(model, k, part)))
                .collect();
            hs.into_iter()
                .map(|h| h.join().expect("eval thread"))
                .collect()
        });
        let mut all = Vec::with_capacity(clips.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (c, p) in clips.iter().zip(&preds) {
        confusion[c.label][*p] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        k,
        accuracy: correct as f64 / clips.len().max(1) as f64,
        confusion,
    })
}

/// The held-out corpus implied by `config`.
pub fn eval_corpus(config: &TrainConfig) -> Result<Vec<ClipSample>> {
    generate_corpus(
        config.seed,
        Split::Eval,
        config.eval_clips,
        config.clip_len,
        1,
    )
}

/// Finite-difference check of the full training objective (backbone,
/// attention, head and every loss term) on two short clips, sampling
/// `coords` coordinates per parameter tensor.
pub fn pipeline_grad_check(seed: u64, coords: usize, step: f64) -> Result<GradCheckReport> {
    let cfg = TrainConfig {
        seed,
        // Auxiliary weights raised so their gradients are visible.
        beta: 0.1,
        gamma: 0.1,
        lambda_wd: 0.01,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let model = Model::init(cfg.model_spec(), &mut rng)?;
    let clips = (0..2)
        .map(|i| corpus_clip(seed, Split::Train, i, 2))
        .collect::<Result<Vec<_>>>()?;
    // Zero biases on all-zero ReLU patches sit exactly on the kink, so the
    // check runs at a generic point instead.
    let inputs: Vec<Tensor> = model
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let mut t = t.clone();
            if name.ends_with("bias") {
                for v in t.data_mut() {
                    *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            t
        })
        .collect();
    let program = |tape: &mut Tape, vars: &[Var]| {
        let bound = model.bind_vars(vars)?;
        let (total, _, _) = batch_objective::<ChaCha8Rng>(tape, &bound, &clips, &cfg, None, false)?;
        Ok(total)
    };
    let opts = GradCheckOptions {
        step,
        max_coords: Some(coords),
        seed,
        skip_kinks: true,
    };
    grad_check_many(program, &inputs, opts)
}
