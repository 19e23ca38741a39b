//! Alignment block: two pooled branches over per-pixel channel perceptrons,
//! a third perceptron on their sum, and the result multiplied back onto the
//! input channels.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Ctx, ParamStore};

/// `C -> C/r -> C` with a ReLU in between, applied to each pixel's channel
/// vector (1x1 convolutions).
#[derive(Clone, Debug)]
pub struct PointwiseMlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl PointwiseMlp {
    fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Conv2d::new(store, &format!("{name}.fc1"), c, hidden, 1, 1, 0, rng),
            fc2: Conv2d::new(store, &format!("{name}.fc2"), hidden, c, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.graph.relu(h);
        self.fc2.forward(ctx, h)
    }
}

/// `C -> C/r -> C` on a pooled `[N, C]` descriptor.
#[derive(Clone, Debug)]
pub struct VectorMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VectorMlp {
    fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, c, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.graph.relu(h);
        self.fc2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct VlabParams {
    pub channels: usize,
    pub reduction: usize,
    pub mlp_avg: PointwiseMlp,
    /// Same parameter ids as `mlp_avg` when the branches share weights.
    pub mlp_max: PointwiseMlp,
    pub mlp_out: VectorMlp,
}

impl VlabParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        share_branches: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::ReductionNotDividing {
                channels,
                ratio: reduction,
            });
        }
        let hidden = channels / reduction;
        let mlp_avg = PointwiseMlp::new(store, &format!("{name}.mlp_avg"), channels, hidden, rng);
        let mlp_max = if share_branches {
            mlp_avg.clone()
        } else {
            PointwiseMlp::new(store, &format!("{name}.mlp_max"), channels, hidden, rng)
        };
        let mlp_out = VectorMlp::new(store, &format!("{name}.mlp_out"), channels, hidden, rng);
        Ok(Self {
            channels,
            reduction,
            mlp_avg,
            mlp_max,
            mlp_out,
        })
    }
}

/// Intermediate nodes of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct VlabOutput {
    pub f_avg: Var,
    pub f_max: Var,
    /// Channel scale `[N, C]`.
    pub scale: Var,
    /// Output map, same shape as the input.
    pub y: Var,
}

/// `y = MLP_out(GAP(MLP_avg(x)) + GMP(MLP_max(x))) * x`.
pub fn vlab_forward(ctx: &mut Ctx, x: Var, p: &VlabParams) -> Result<VlabOutput> {
    let shape = ctx.graph.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "alignment block for {} channels got input {shape:?}",
            p.channels
        )));
    }
    let a = p.mlp_avg.forward(ctx, x);
    let f_avg = ctx.graph.global_avg_pool(a);
    let m = p.mlp_max.forward(ctx, x);
    let f_max = ctx.graph.global_max_pool(m);
    let pooled = ctx.graph.add(f_avg, f_max);
    let scale = p.mlp_out.forward(ctx, pooled);
    let y = ctx.graph.channel_mul(x, scale);
    Ok(VlabOutput {
        f_avg,
        f_max,
        scale,
        y,
    })
}
