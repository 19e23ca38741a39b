//! Parameterised layers built on the autodiff tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BnStats, UpsampleMode, Var};
use crate::params::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Running-moment momentum for batch normalisation.
pub const BN_MOMENTUM: f64 = 0.1;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = normal_tensor(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable),
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), ParamKind::Buffer),
        }
    }

    /// Batch statistics in training mode when the batch holds more than one
    /// sample; running statistics otherwise.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let batch = ctx.graph.value(x).shape()[0];
        if ctx.mode() == Mode::Train && batch > 1 {
            let y = ctx.graph.batch_norm(x, gamma, beta, BnStats::Batch);
            let (n, _, h, w) = ctx.graph.value(x).dims4();
            let count = (n * h * w) as f64;
            let (mean, var) = ctx.graph.bn_moments(y).expect("batch moments");
            let rm = ctx.store().get(self.running_mean).data();
            let rv = ctx.store().get(self.running_var).data();
            let new_mean: Vec<f64> = rm
                .iter()
                .zip(mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let new_var: Vec<f64> = rv
                .iter()
                .zip(var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * count / (count - 1.0))
                .collect();
            let c = new_mean.len();
            ctx.push_update(self.running_mean, Tensor::from_vec(&[c], new_mean));
            ctx.push_update(self.running_var, Tensor::from_vec(&[c], new_var));
            y
        } else {
            let mean = ctx.store().get(self.running_mean).data().to_vec();
            let var = ctx.store().get(self.running_var).data().to_vec();
            ctx.graph.batch_norm(
                x,
                gamma,
                beta,
                BnStats::Fixed {
                    mean: &mean,
                    var: &var,
                },
            )
        }
    }
}

/// `ReLU(BatchNorm(Conv(x)))`.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, 1, kernel / 2, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        ctx.graph.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (fin + fout) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), normal_tensor(&[fout, fin], std, rng), ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), ParamKind::Trainable),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Trainable),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.graph.layer_norm(x, g, b)
    }
}

/// A learned tensor added to every sample (positional embeddings).
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            table: store.add(name.to_string(), normal_tensor(shape, 0.02, rng), ParamKind::Trainable),
        }
    }

    pub fn add_to(&self, ctx: &mut Ctx, x: Var) -> Var {
        let p = ctx.param(self.table);
        ctx.graph.add_broadcast(x, p)
    }
}

/// Resampling choice shared by the encoder reconstruction and decoder.
pub fn upsample(ctx: &mut Ctx, x: Var, factor: usize, mode: UpsampleMode) -> Var {
    if factor == 1 {
        x
    } else {
        ctx.graph.upsample(x, factor, mode)
    }
}
