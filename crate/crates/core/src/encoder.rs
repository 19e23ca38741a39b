//! Hierarchical encoder. Each stage runs a convolution block, tokenises its
//! output for a transformer block, maps the tokens back onto the
//! convolutional grid and adds the two paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvBnRelu, Embedding, LayerNorm, Linear};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Side of the square patch folded into one token.
    pub token_patch: usize,
    pub mlp_ratio: f64,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// 1-based stage number.
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(H, W)` of this stage's output maps: the input divided by `2^index`.
    pub out_dims: (usize, usize),
    pub attention: AttentionConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("stage {}: channels must be positive", self.index)));
        }
        if self.out_channels % 8 != 0 {
            return Err(Error::ChannelsNotDivisibleBy8(self.out_channels));
        }
        if a.num_heads == 0 || a.embed_dim == 0 || a.embed_dim % a.num_heads != 0 {
            return Err(Error::Config(format!(
                "stage {}: embed dim {} must be a positive multiple of {} heads",
                self.index, a.embed_dim, a.num_heads
            )));
        }
        if !(a.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("stage {}: mlp ratio must be positive", self.index)));
        }
        let (h, w) = self.out_dims;
        if a.token_patch == 0 || h % a.token_patch != 0 || w % a.token_patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "stage {}: token patch {} does not divide {h}x{w}",
                self.index, a.token_patch
            )));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> (usize, usize) {
        let p = self.attention.token_patch;
        (self.out_dims.0 / p, self.out_dims.1 / p)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.attention.embed_dim as f64 * self.attention.mlp_ratio).round() as usize).max(1)
    }
}

/// Symbolic per-stage maps on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub cnn: Var,
    pub vit: Var,
    pub rt: Var,
    pub encoder: Var,
    /// The attention node, for inspecting softmax weights.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub stages: Vec<StageOutput>,
}

/// Concrete per-stage maps.
#[derive(Clone, Debug, PartialEq)]
pub struct StageMaps {
    pub cnn: Tensor,
    pub vit: Tensor,
    pub rt: Tensor,
    pub encoder: Tensor,
}

impl FeaturePyramid {
    pub fn deepest(&self) -> &StageOutput {
        self.stages.last().expect("non-empty pyramid")
    }

    pub fn materialize(&self, graph: &Graph) -> Vec<StageMaps> {
        self.stages
            .iter()
            .map(|s| StageMaps {
                cnn: graph.value(s.cnn).clone(),
                vit: graph.value(s.vit).clone(),
                rt: graph.value(s.rt).clone(),
                encoder: graph.value(s.encoder).clone(),
            })
            .collect()
    }
}

/// Pre-norm transformer block over patch tokens.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub patch_embed: Conv2d,
    pub pos: Embedding,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &StageConfig, rng: &mut impl Rng) -> Self {
        let a = &cfg.attention;
        let d = a.embed_dim;
        let (gh, gw) = cfg.token_grid();
        let hidden = cfg.mlp_hidden();
        let p = a.token_patch;
        Self {
            patch_embed: Conv2d::new(store, &format!("{name}.patch_embed"), cfg.out_channels, d, p, p, 0, rng),
            pos: Embedding::new(store, &format!("{name}.pos"), &[gh * gw, d], rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, rng),
            heads: a.num_heads,
        }
    }

    /// Returns the token map `[N, D, H/p, W/p]` and the attention node.
    fn forward(&self, ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> (Var, Var) {
        let t = self.patch_embed.forward(ctx, x);
        let t = ctx.graph.map_to_tokens(t);
        let t = self.pos.add_to(ctx, t);

        let h = self.ln1.forward(ctx, t);
        let q = self.q.forward(ctx, h);
        let k = self.k.forward(ctx, h);
        let v = self.v.forward(ctx, h);
        let attn = ctx.graph.attention(q, k, v, self.heads);
        let a = self.proj.forward(ctx, attn);
        let t = ctx.graph.add(t, a);

        let h = self.ln2.forward(ctx, t);
        let h = self.fc1.forward(ctx, h);
        let h = ctx.graph.gelu(h);
        let h = self.fc2.forward(ctx, h);
        let t = ctx.graph.add(t, h);

        (ctx.graph.tokens_to_map(t, grid.0, grid.1), attn)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub cfg: StageConfig,
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    pub attention: AttentionBlock,
    /// 1x1 convolution + norm + ReLU applied to the upsampled token map.
    pub reconstruct: ConvBnRelu,
    pub upsample: UpsampleMode,
}

fn dims(graph: &Graph, x: Var) -> (usize, usize, usize, usize) {
    graph.value(x).dims4()
}

impl EncoderStage {
    pub fn new(
        store: &mut ParamStore,
        cfg: StageConfig,
        upsample: UpsampleMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let name = format!("encoder.{}", cfg.index);
        let c = cfg.out_channels;
        Ok(Self {
            conv1: ConvBnRelu::new(store, &format!("{name}.conv1"), cfg.in_channels, c, 3, rng),
            conv2: ConvBnRelu::new(store, &format!("{name}.conv2"), c, c, 3, rng),
            attention: AttentionBlock::new(store, &format!("{name}.attn"), &cfg, rng),
            reconstruct: ConvBnRelu::new(store, &format!("{name}.reconstruct"), cfg.attention.embed_dim, c, 1, rng),
            upsample,
            cfg,
        })
    }

    /// Two 3x3 conv + norm + ReLU layers, then 2x2 max pooling.
    pub fn conv_block(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, c, h, w) = dims(&ctx.graph, x);
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "stage {} expects {} input channels, got {c}",
                self.cfg.index, self.cfg.in_channels
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("odd spatial dims {h}x{w}")));
        }
        if (h / 2, w / 2) != self.cfg.out_dims {
            return Err(Error::ShapeMismatch(format!(
                "stage {} configured for {:?} outputs, input is {h}x{w}",
                self.cfg.index, self.cfg.out_dims
            )));
        }
        let y = self.conv1.forward(ctx, x);
        let y = self.conv2.forward(ctx, y);
        Ok(ctx.graph.max_pool2(y))
    }

    /// Tokenise, add positional embeddings, run one transformer block.
    /// Returns the token map and the attention node.
    pub fn attention_block(&self, ctx: &mut Ctx, f_cnn: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = dims(&ctx.graph, f_cnn);
        let p = self.cfg.attention.token_patch;
        if c != self.cfg.out_channels || (h, w) != self.cfg.out_dims || h % p != 0 || w % p != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention block of stage {} got {c}x{h}x{w} with patch {p}",
                self.cfg.index
            )));
        }
        Ok(self.attention.forward(ctx, f_cnn, (h / p, w / p)))
    }

    /// Upsample the token map to the convolutional grid, project it with the
    /// reconstruction layer and add the convolutional features. Returns
    /// `(F_rt, F_encoder)`.
    pub fn reconstruct_fuse(&self, ctx: &mut Ctx, f_vit: Var, f_cnn: Var) -> Result<(Var, Var)> {
        let (_, _, vh, vw) = dims(&ctx.graph, f_vit);
        let (_, _, ch, cw) = dims(&ctx.graph, f_cnn);
        if vh == 0 || vw == 0 || ch % vh != 0 || cw % vw != 0 || ch / vh != cw / vw {
            return Err(Error::ShapeMismatch(format!(
                "token map {vh}x{vw} does not evenly divide feature map {ch}x{cw}"
            )));
        }
        let up = nn::upsample(ctx, f_vit, ch / vh, self.upsample);
        let rt = self.reconstruct.forward(ctx, up);
        Ok((rt, ctx.graph.add(f_cnn, rt)))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<StageOutput> {
        let cnn = self.conv_block(ctx, x)?;
        let (vit, attention) = self.attention_block(ctx, cnn)?;
        let (rt, encoder) = self.reconstruct_fuse(ctx, vit, cnn)?;
        Ok(StageOutput {
            cnn,
            vit,
            rt,
            encoder,
            attention,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        stages: Vec<StageConfig>,
        upsample: UpsampleMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for pair in stages.windows(2) {
            if pair[1].in_channels != pair[0].out_channels {
                return Err(Error::Config(format!(
                    "stage {} consumes {} channels but stage {} produces {}",
                    pair[1].index, pair[1].in_channels, pair[0].index, pair[0].out_channels
                )));
            }
        }
        let stages = stages
            .into_iter()
            .map(|cfg| EncoderStage::new(store, cfg, upsample, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    /// Run every stage; stage `i` consumes the fused output of stage `i - 1`.
    pub fn encode_pyramid(&self, ctx: &mut Ctx, image: Var) -> Result<FeaturePyramid> {
        let (_, _, h, w) = dims(&ctx.graph, image);
        let scale = 1usize << self.stages.len();
        if h % scale != 0 || w % scale != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} is not divisible by 2^{}",
                self.stages.len()
            )));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let s = stage.forward(ctx, x)?;
            x = s.encoder;
            out.push(s);
        }
        Ok(FeaturePyramid { stages: out })
    }
}
