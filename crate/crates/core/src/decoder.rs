//! Convolutional decoder. Stage `i` works at the resolution of encoder stage
//! `i`: it concatenates the running map with that stage's aligned skip
//! features, applies two conv + norm + ReLU layers and upsamples by two. A
//! full-resolution head then joins the input image and emits one logit per
//! pixel.

use rand::Rng;

use crate::autodiff::{UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::metrics::SegmentationMask;
use crate::nn::{self, Conv2d, ConvBnRelu};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Encoder stage whose resolution this stage runs at (1-based).
    pub index: usize,
    pub in_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Shallow to deep; evaluated deep to shallow.
    pub stages: Vec<DecoderStage>,
    pub head: ConvBnRelu,
    pub out: Conv2d,
    pub image_channels: usize,
    pub upsample: UpsampleMode,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[N, 1, H, W]` logits at input resolution.
    pub logits: Var,
    /// Activation of each decoder stage before upsampling, indexed by
    /// `stage - 1`.
    pub activations: Vec<Var>,
}

/// Decoder widths mirror the encoder: stage `i` emits the channel count of
/// encoder stage `i - 1`, and stage 1 emits half of stage 1's width.
pub fn decoder_widths(channels: &[usize]) -> Vec<usize> {
    (0..channels.len())
        .map(|i| if i == 0 { (channels[0] / 2).max(1) } else { channels[i - 1] })
        .collect()
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        channels: &[usize],
        image_channels: usize,
        upsample: UpsampleMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("decoder needs at least one stage".into()));
        }
        let widths = decoder_widths(channels);
        let s = channels.len();
        let mut stages = Vec::with_capacity(s);
        for i in 0..s {
            let in_channels = if i == s - 1 { channels[s - 1] } else { widths[i + 1] };
            let name = format!("decoder.{}", i + 1);
            let cin = in_channels + channels[i];
            stages.push(DecoderStage {
                index: i + 1,
                in_channels,
                skip_channels: channels[i],
                out_channels: widths[i],
                conv1: ConvBnRelu::new(store, &format!("{name}.conv1"), cin, widths[i], 3, rng),
                conv2: ConvBnRelu::new(store, &format!("{name}.conv2"), widths[i], widths[i], 3, rng),
            });
        }
        let d1 = widths[0];
        Ok(Self {
            head: ConvBnRelu::new(store, "decoder.head", d1 + image_channels, d1, 3, rng),
            out: Conv2d::new(store, "decoder.out", d1, 1, 1, 1, 0, rng),
            stages,
            image_channels,
            upsample,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `skips` are the aligned maps ordered shallow to deep; `deepest` is the
    /// fused encoder output of the last stage.
    pub fn decode_masks(&self, ctx: &mut Ctx, skips: &[Var], deepest: Var, image: Var) -> Result<DecoderOutput> {
        let s = self.stages.len();
        if skips.len() != s {
            return Err(Error::ShapeMismatch(format!("{} skip maps for {s} decoder stages", skips.len())));
        }
        let mut x = deepest;
        let mut activations = vec![None; s];
        for stage in self.stages.iter().rev() {
            let skip = skips[stage.index - 1];
            let (xn, xc, xh, xw) = ctx.graph.value(x).dims4();
            let (sn, sc, sh, sw) = ctx.graph.value(skip).dims4();
            if (xn, xh, xw) != (sn, sh, sw) || xc != stage.in_channels || sc != stage.skip_channels {
                return Err(Error::ShapeMismatch(format!(
                    "decoder stage {}: map {xn}x{xc}x{xh}x{xw} and skip {sn}x{sc}x{sh}x{sw}",
                    stage.index
                )));
            }
            let z = ctx.graph.concat_channels(&[x, skip]);
            let z = stage.conv1.forward(ctx, z);
            let z = stage.conv2.forward(ctx, z);
            activations[stage.index - 1] = Some(z);
            x = nn::upsample(ctx, z, 2, self.upsample);
        }
        let (xn, _, xh, xw) = ctx.graph.value(x).dims4();
        let (inn, ic, ih, iw) = ctx.graph.value(image).dims4();
        if (xn, xh, xw) != (inn, ih, iw) || ic != self.image_channels {
            return Err(Error::ShapeMismatch(format!(
                "decoder output {xn}x{xh}x{xw} does not match image {inn}x{ic}x{ih}x{iw}"
            )));
        }
        let z = ctx.graph.concat_channels(&[x, image]);
        let z = self.head.forward(ctx, z);
        let logits = self.out.forward(ctx, z);
        Ok(DecoderOutput {
            logits,
            activations: activations.into_iter().map(|a| a.expect("every stage ran")).collect(),
        })
    }
}

/// Binarise one `H x W` logit map (any shape with `H x W` trailing, batch 1):
/// `sigmoid(logit) >= threshold`.
pub fn logits_to_mask(logits: &Tensor, threshold: f64) -> SegmentationMask {
    let shape = logits.shape();
    let (h, w) = match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[shape.len() - 2], shape[shape.len() - 1]),
    };
    assert_eq!(logits.numel(), h * w, "logits_to_mask expects a single map");
    let pixels = logits.data().iter().map(|&z| sigmoid(z) >= threshold).collect();
    SegmentationMask::new(h, w, pixels)
}

/// Binarise each sample of a `[N, 1, H, W]` batch.
pub fn batch_logits_to_masks(logits: &Tensor, threshold: f64) -> Vec<SegmentationMask> {
    let (n, _, h, w) = logits.dims4();
    (0..n)
        .map(|i| {
            let map = Tensor::from_vec(&[h, w], logits.data()[i * h * w..(i + 1) * h * w].to_vec());
            logits_to_mask(&map, threshold)
        })
        .collect()
}
