//! Three-stage convolutional backbone, attention (or mean-pool) temporal
//! aggregation and a two-layer classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FRAME_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::pyramid::{
    attention_forward, AttentionForwardRecord, AttentionLayerParams, AttentionVars, FrameGrid,
    Fusion,
};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

pub const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];
/// Input to the first convolution has one channel.
pub const INPUT_CHANNELS: usize = 1;
pub const HEAD_HIDDEN: usize = 64;
/// Spatial extent of the top stage for 32×32 input.
pub const TOP_EXTENT: usize = 4;
/// Input pixels per top-level cell.
pub const TOP_STRIDE: usize = FRAME_SIZE / TOP_EXTENT;
pub const MAX_SCALES: usize = 4;

/// Channels of the candidate pyramid levels, shallowest first: the first
/// convolution before pooling, then the three pooled stages.
pub const LEVEL_CHANNELS: [usize; MAX_SCALES] = [8, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Attention,
    MeanPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `3×3×Cin×Cout`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stages: [ConvParams; 3],
}

impl BackboneParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut cin = INPUT_CHANNELS;
        let stages = STAGE_CHANNELS.map(|cout| {
            let fan_in = 9 * cin;
            let p = ConvParams {
                kernel: Tensor::uniform(&[3, 3, cin, cout], (6.0 / fan_in as f64).sqrt(), rng),
                bias: Tensor::zeros(&[cout]),
            };
            cin = cout;
            p
        });
        Self { stages }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, inputs: usize, classes: usize) -> Self {
        Self {
            fc1_weight: Tensor::uniform(&[inputs, HEAD_HIDDEN], (6.0 / inputs as f64).sqrt(), rng),
            fc1_bias: Tensor::zeros(&[HEAD_HIDDEN]),
            fc2_weight: Tensor::uniform(
                &[HEAD_HIDDEN, classes],
                (6.0 / (HEAD_HIDDEN + classes) as f64).sqrt(),
                rng,
            ),
            fc2_bias: Tensor::zeros(&[classes]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub scales: usize,
    pub fusion: Fusion,
    pub aggregation: Aggregation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SCALES).contains(&self.scales) {
            return Err(Error::Parameter(format!(
                "scales must be in 1..={MAX_SCALES}, got {}",
                self.scales
            )));
        }
        Ok(())
    }

    pub fn level_channels(&self) -> &'static [usize] {
        &LEVEL_CHANNELS[MAX_SCALES - self.scales..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: BackboneParams,
    pub attention: Option<AttentionLayerParams>,
    pub head: HeadParams,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let backbone = BackboneParams::init(rng);
        let attention = match spec.aggregation {
            Aggregation::Attention => Some(AttentionLayerParams::init(
                spec.level_channels(),
                (TOP_EXTENT, TOP_EXTENT),
                spec.fusion,
                rng,
            )),
            Aggregation::MeanPool => None,
        };
        let head = HeadParams::init(
            rng,
            TOP_EXTENT * TOP_EXTENT * STAGE_CHANNELS[2],
            NUM_CLASSES,
        );
        Ok(Self {
            spec,
            backbone,
            attention,
            head,
        })
    }

    /// Every trainable tensor with a stable name, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.conv{}.kernel", i + 1), &s.kernel));
            out.push((format!("backbone.conv{}.bias", i + 1), &s.bias));
        }
        if let Some(att) = &self.attention {
            for (j, l) in att.levels.iter().enumerate() {
                out.push((format!("attention.level{j}.weight"), &l.weight));
                out.push((format!("attention.level{j}.bias"), &l.bias));
            }
        }
        let h = &self.head;
        out.push(("head.fc1.weight".into(), &h.fc1_weight));
        out.push(("head.fc1.bias".into(), &h.fc1_bias));
        out.push(("head.fc2.weight".into(), &h.fc2_weight));
        out.push(("head.fc2.bias".into(), &h.fc2_bias));
        out
    }

    /// Mutable view in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.backbone.stages {
            out.push(&mut s.kernel);
            out.push(&mut s.bias);
        }
        if let Some(att) = &mut self.attention {
            for l in &mut att.levels {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        let h = &mut self.head;
        out.extend([
            &mut h.fc1_weight,
            &mut h.fc1_bias,
            &mut h.fc2_weight,
            &mut h.fc2_bias,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        self.bind_vars(&vars).expect("one var per parameter")
    }

    /// Assembles a [`BoundModel`] from vars already on a tape, ordered as
    /// [`Model::named_params`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let levels = self.attention.as_ref().map_or(0, |a| a.levels.len());
        let expected = 6 + 2 * levels + 4;
        if vars.len() != expected {
            return Err(Error::dim("bind_vars", &[vars.len()], &[expected]));
        }
        let stages = [(vars[0], vars[1]), (vars[2], vars[3]), (vars[4], vars[5])];
        let attention = self.attention.as_ref().map(|a| AttentionVars {
            weights: (0..levels).map(|j| vars[6 + 2 * j]).collect(),
            biases: (0..levels).map(|j| vars[7 + 2 * j]).collect(),
            fusion: a.fusion,
        });
        let h = 6 + 2 * levels;
        Ok(BoundModel {
            spec: self.spec,
            stages,
            attention,
            head: [vars[h], vars[h + 1], vars[h + 2], vars[h + 3]],
            all: vars.to_vec(),
        })
    }

    /// Attention matrix `A` and its frame grid for one clip, plus the
    /// clip's logits.
    pub fn inspect(&self, frames: &Tensor) -> Result<(Tensor, FrameGrid, Vec<f64>)> {
        if self.attention.is_none() {
            return Err(Error::Contract(
                "mean-pool model has no attention matrix".into(),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = forward_clips::<rand_chacha::ChaCha8Rng>(&mut tape, &bound, &[frames], None)?;
        let rec = out[0].attention.as_ref().expect("attention model");
        Ok((
            tape.value(rec.attention).clone(),
            rec.grid,
            tape.value(out[0].logits).data().to_vec(),
        ))
    }
}

/// Model parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub spec: ModelSpec,
    pub stages: [(Var, Var); 3],
    pub attention: Option<AttentionVars>,
    pub head: [Var; 4],
    /// Same order as [`Model::named_params`].
    pub all: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// First convolution after relu, before pooling: `K×32×32×8`.
    pub conv1: Var,
    /// `K×16×16×8`, `K×8×8×16`, `K×4×4×32`.
    pub stages: [Var; 3],
}

impl BackboneOutput {
    /// The last `scales` candidate levels, shallowest first.
    pub fn pyramid(&self, scales: usize) -> Vec<Var> {
        let all = [self.conv1, self.stages[0], self.stages[1], self.stages[2]];
        all[MAX_SCALES - scales..].to_vec()
    }
}

/// Frame-wise `(conv 3×3 same → relu → max-pool /2)` ×3 with shared
/// weights.
pub fn backbone_forward(
    tape: &mut Tape,
    frames: Var,
    stages: &[(Var, Var); 3],
) -> Result<BackboneOutput> {
    match *tape.shape(frames) {
        [_, FRAME_SIZE, FRAME_SIZE, INPUT_CHANNELS] => {}
        ref other => {
            return Err(Error::dim(
                "backbone_forward",
                other,
                &[FRAME_SIZE, FRAME_SIZE, INPUT_CHANNELS],
            ))
        }
    }
    let mut x = frames;
    let mut conv1 = None;
    let mut outs = [frames; 3];
    for (i, &(k, b)) in stages.iter().enumerate() {
        let c = tape.conv2d(x, k, 1, Padding::Same)?;
        let c = tape.add_channel_bias(c, b)?;
        let a = tape.relu(c);
        if i == 0 {
            conv1 = Some(a);
        }
        let shape = tape.shape(a);
        let target = (shape[1] / 2, shape[2] / 2);
        x = tape.adaptive_max_pool2d(a, target)?;
        outs[i] = x;
    }
    Ok(BackboneOutput {
        conv1: conv1.expect("three stages"),
        stages: outs,
    })
}

/// Flatten → affine(64) → relu → optional dropout → affine(classes).
pub fn head_forward(
    tape: &mut Tape,
    attention_map: Var,
    head: &[Var; 4],
    dropout_mask: Option<Vec<f64>>,
) -> Result<Var> {
    let inputs = tape.value(head[0]).shape()[0];
    if tape.value(attention_map).numel() != inputs {
        return Err(Error::dim(
            "head_forward",
            tape.shape(attention_map),
            tape.shape(head[0]),
        ));
    }
    let flat = tape.reshape(attention_map, &[1, inputs])?;
    let hidden = tape.affine(flat, head[0], head[1])?;
    let mut hidden = tape.relu(hidden);
    if let Some(mask) = dropout_mask {
        hidden = tape.dropout(hidden, mask)?;
    }
    tape.affine(hidden, head[2], head[3])
}

#[derive(Debug, Clone)]
pub struct ClipForward {
    /// `1×classes`.
    pub logits: Var,
    pub attention: Option<AttentionForwardRecord>,
}

/// Inverted-dropout masks for the head's hidden layer.
pub struct DropoutSampler<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> DropoutSampler<'_, R> {
    fn mask(&mut self) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..HEAD_HIDDEN)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Runs every clip (`K_c×32×32×1`) through the backbone in one batch, then
/// aggregates and classifies each clip separately.
pub fn forward_clips<R: Rng>(
    tape: &mut Tape,
    model: &BoundModel,
    clips: &[&Tensor],
    mut dropout: Option<DropoutSampler<'_, R>>,
) -> Result<Vec<ClipForward>> {
    let inner = FRAME_SIZE * FRAME_SIZE * INPUT_CHANNELS;
    let total: usize = clips.iter().map(|c| c.shape()[0]).sum();
    let mut data = Vec::with_capacity(total * inner);
    for c in clips {
        if c.shape()[1..] != [FRAME_SIZE, FRAME_SIZE, INPUT_CHANNELS] {
            return Err(Error::dim(
                "forward_clips",
                c.shape(),
                &[FRAME_SIZE, FRAME_SIZE, INPUT_CHANNELS],
            ));
        }
        data.extend_from_slice(c.data());
    }
    let frames = tape.constant(Tensor::new(
        &[total, FRAME_SIZE, FRAME_SIZE, INPUT_CHANNELS],
        data,
    )?);
    let features = backbone_forward(tape, frames, &model.stages)?;
    let levels = features.pyramid(model.spec.scales);
    let mut out = Vec::with_capacity(clips.len());
    let mut offset = 0;
    for c in clips {
        let k = c.shape()[0];
        let (map, record) = match &model.attention {
            Some(att) => {
                let clip_levels = levels
                    .iter()
                    .map(|&l| tape.slice_frames(l, offset, k))
                    .collect::<Result<Vec<_>>>()?;
                let rec = attention_forward(tape, &clip_levels, att)?;
                (rec.attention_map, Some(rec))
            }
            None => {
                let top = tape.slice_frames(*levels.last().expect("levels"), offset, k)?;
                (tape.mean_frames(top)?, None)
            }
        };
        let mask = dropout.as_mut().filter(|d| d.rate > 0.0).map(|d| d.mask());
        let logits = head_forward(tape, map, &model.head, mask)?;
        out.push(ClipForward {
            logits,
            attention: record,
        });
        offset += k;
    }
    Ok(out)
}
