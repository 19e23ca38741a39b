//! Text gating of encoder features: each channel is scaled by the entry of
//! the text vector that the channel is tiled onto.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::report_codec::TextVector;
use crate::tensor::Tensor;

/// Which encoder stages receive the text gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Every stage is gated with the zero vector.
    None,
    /// Only the deepest stage is gated; the others pass through.
    Single,
    #[default]
    Multi,
}

impl TextMode {
    /// Gate to use at `stage` (1-based) of `stages`, or `None` to pass through.
    pub fn gate_for(self, text: &TextVector, stage: usize, stages: usize) -> Option<TextVector> {
        match self {
            TextMode::None => Some(TextVector::zero()),
            TextMode::Single if stage != stages => None,
            TextMode::Single | TextMode::Multi => Some(*text),
        }
    }
}

/// Scaling of the lesion-count entry before gating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountScaling {
    #[default]
    Raw,
    /// `min(count, 9) / 9`.
    Normalized,
}

pub const MAX_WORD_COUNT: f64 = 9.0;

pub fn gate_values(v: &TextVector, scaling: CountScaling) -> [f64; 8] {
    let mut g = v.as_f64();
    if scaling == CountScaling::Normalized {
        g[1] = g[1].min(MAX_WORD_COUNT) / MAX_WORD_COUNT;
    }
    g
}

/// `channels / 8` consecutive copies of the vector: `[v, v, ..., v]`.
pub fn repeat_text(values: &[f64; 8], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 8 != 0 {
        return Err(Error::ChannelsNotDivisibleBy8(channels));
    }
    Ok(values.iter().copied().cycle().take(channels).collect())
}

/// A gated feature map and the channel weights that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedFeature {
    pub features: Tensor,
    pub gate: Vec<f64>,
}

/// Gate a single `C x H x W` (or `1 x C x H x W`) map.
pub fn apply_text_gating(features: &Tensor, v: &TextVector, scaling: CountScaling) -> Result<GatedFeature> {
    let (c, hw) = match features.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h * w),
        s => return Err(Error::ShapeMismatch(format!("expected C x H x W features, got {s:?}"))),
    };
    let gate = repeat_text(&gate_values(v, scaling), c)?;
    let mut out = features.clone();
    for (ch, &g) in gate.iter().enumerate() {
        out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x *= g);
    }
    Ok(GatedFeature { features: out, gate })
}

/// Differentiable batched gating of `[N, C, H, W]` with one vector per sample.
/// The text is a constant: gradient flows to the features only.
pub fn gate_var(graph: &mut Graph, x: Var, texts: &[TextVector], scaling: CountScaling) -> Result<Var> {
    let (n, c, _, _) = graph.value(x).dims4();
    if texts.len() != n {
        return Err(Error::ShapeMismatch(format!("{} text vectors for a batch of {n}", texts.len())));
    }
    let mut gates = Vec::with_capacity(n * c);
    for t in texts {
        gates.extend(repeat_text(&gate_values(t, scaling), c)?);
    }
    Ok(graph.channel_gate(x, Tensor::from_vec(&[n, c], gates)))
}
