//! Full network wiring: encoder pyramid, text gating and alignment blocks on
//! every skip connection, decoder.

use rand::Rng;

use crate::autodiff::{UpsampleMode, Var};
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{AttentionConfig, Encoder, FeaturePyramid, StageConfig};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::report_codec::TextVector;
use crate::tensor::Tensor;
use crate::vl_aggregation::{gate_var, CountScaling, TextMode};
use crate::vlab::{vlab_forward, VlabOutput, VlabParams};

/// Where the text gate sits relative to the alignment block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateOrder {
    #[default]
    GateThenVlab,
    VlabThenGate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output width of each encoder stage.
    pub channels: Vec<usize>,
    /// Requested token patch; stages whose maps it does not fit use 1.
    pub token_patch: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Token width; `None` uses the stage's channel count.
    pub embed_dim: Option<usize>,
    pub vlab_reduction: usize,
    pub share_branch_mlp: bool,
    pub upsample: UpsampleMode,
    pub gate_order: GateOrder,
    pub text_mode: TextMode,
    pub count_scaling: CountScaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 1,
            channels: vec![16, 32, 64, 128],
            token_patch: 2,
            heads: 4,
            mlp_ratio: 2.0,
            embed_dim: None,
            vlab_reduction: 4,
            share_branch_mlp: false,
            upsample: UpsampleMode::Nearest,
            gate_order: GateOrder::GateThenVlab,
            text_mode: TextMode::Multi,
            count_scaling: CountScaling::Raw,
        }
    }
}

impl ModelConfig {
    /// Channels `[8, 16, 24, 32]` on 16x16 inputs.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            channels: vec![8, 16, 24, 32],
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels.len()
    }

    pub fn stages(&self) -> Result<Vec<StageConfig>> {
        let s = self.channels.len();
        if s == 0 {
            return Err(Error::Config("model.channels must list at least one stage".into()));
        }
        if self.image_size == 0 || self.image_size % (1 << s) != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{s}",
                self.image_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("model.in_channels must be positive".into()));
        }
        let stages = (0..s)
            .map(|i| {
                let side = self.image_size >> (i + 1);
                let patch = if self.token_patch > 0 && side % self.token_patch == 0 {
                    self.token_patch
                } else {
                    1
                };
                StageConfig {
                    index: i + 1,
                    in_channels: if i == 0 { self.in_channels } else { self.channels[i - 1] },
                    out_channels: self.channels[i],
                    out_dims: (side, side),
                    attention: AttentionConfig {
                        num_heads: self.heads,
                        token_patch: patch,
                        mlp_ratio: self.mlp_ratio,
                        embed_dim: self.embed_dim.unwrap_or(self.channels[i]),
                    },
                }
            })
            .collect::<Vec<_>>();
        for st in &stages {
            st.validate()?;
        }
        Ok(stages)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages()?;
        for &c in &self.channels {
            if self.vlab_reduction == 0 || c % self.vlab_reduction != 0 {
                return Err(Error::ReductionNotDividing {
                    channels: c,
                    ratio: self.vlab_reduction,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub vlabs: Vec<VlabParams>,
    pub decoder: Decoder,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub image: Var,
    pub pyramid: FeaturePyramid,
    /// Skip map after gating and alignment, per stage.
    pub skips: Vec<Var>,
    /// Alignment block nodes per stage.
    pub vlab: Vec<VlabOutput>,
    pub decoder: DecoderOutput,
    pub logits: Var,
    pub probs: Var,
}

impl ForwardPass {
    /// The aligned maps `y_1..y_S` the cosine losses compare.
    pub fn aligned(&self) -> Vec<Var> {
        self.skips.clone()
    }
}

impl Model {
    /// Build the network, registering its parameters in a fresh store.
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.stages()?, cfg.upsample, rng)?;
        let vlabs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                VlabParams::new(
                    &mut store,
                    &format!("vlab.{}", i + 1),
                    c,
                    cfg.vlab_reduction,
                    cfg.share_branch_mlp,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(&mut store, &cfg.channels, cfg.in_channels, cfg.upsample, rng)?;
        Ok((
            Self {
                cfg,
                encoder,
                vlabs,
                decoder,
            },
            store,
        ))
    }

    fn check_input(&self, images: &Tensor, texts: &[TextVector]) -> Result<()> {
        let s = images.shape();
        let side = self.cfg.image_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != side || s[3] != side {
            return Err(Error::DataShape(format!(
                "expected [N, {}, {side}, {side}] images, got {s:?}",
                self.cfg.in_channels
            )));
        }
        if texts.len() != s[0] {
            return Err(Error::DataShape(format!(
                "{} text vectors for {} images",
                texts.len(),
                s[0]
            )));
        }
        Ok(())
    }

    fn gate(&self, ctx: &mut Ctx, x: Var, texts: &[TextVector], stage: usize) -> Result<Var> {
        let s = self.cfg.num_stages();
        let gates: Vec<Option<TextVector>> = texts
            .iter()
            .map(|t| self.cfg.text_mode.gate_for(t, stage, s))
            .collect();
        if gates.iter().all(Option::is_none) {
            return Ok(x);
        }
        let gates: Vec<TextVector> = gates.into_iter().map(|g| g.expect("uniform mode")).collect();
        gate_var(&mut ctx.graph, x, &gates, self.cfg.count_scaling)
    }

    /// Forward a batch `[N, C, H, W]` with one text vector per sample.
    pub fn forward(&self, ctx: &mut Ctx, images: &Tensor, texts: &[TextVector]) -> Result<ForwardPass> {
        self.check_input(images, texts)?;
        let image = ctx.graph.constant(images.clone());
        self.forward_var(ctx, image, texts)
    }

    /// Forward from an image node already on the graph.
    pub fn forward_var(&self, ctx: &mut Ctx, image: Var, texts: &[TextVector]) -> Result<ForwardPass> {
        let pyramid = self.encoder.encode_pyramid(ctx, image)?;
        let mut skips = Vec::with_capacity(pyramid.stages.len());
        let mut vlab = Vec::with_capacity(pyramid.stages.len());
        for (i, stage) in pyramid.stages.iter().enumerate() {
            let out = match self.cfg.gate_order {
                GateOrder::GateThenVlab => {
                    let g = self.gate(ctx, stage.encoder, texts, i + 1)?;
                    let out = vlab_forward(ctx, g, &self.vlabs[i])?;
                    skips.push(out.y);
                    out
                }
                GateOrder::VlabThenGate => {
                    let out = vlab_forward(ctx, stage.encoder, &self.vlabs[i])?;
                    let g = self.gate(ctx, out.y, texts, i + 1)?;
                    skips.push(g);
                    out
                }
            };
            vlab.push(out);
        }
        let deepest = pyramid.deepest().encoder;
        let decoder = self.decoder.decode_masks(ctx, &skips, deepest, image)?;
        let logits = decoder.logits;
        let probs = ctx.graph.sigmoid(logits);
        Ok(ForwardPass {
            image,
            pyramid,
            skips,
            vlab,
            decoder,
            logits,
            probs,
        })
    }

    /// Eval-mode logits `[N, 1, H, W]`.
    pub fn predict_logits(&self, store: &ParamStore, images: &Tensor, texts: &[TextVector]) -> Result<Tensor> {
        let mut ctx = Ctx::inference(store);
        let pass = self.forward(&mut ctx, images, texts)?;
        Ok(ctx.graph.value(pass.logits).clone())
    }
}
