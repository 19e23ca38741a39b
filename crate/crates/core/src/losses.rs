//! Segmentation objectives: Dice, binary cross-entropy and the inter-layer
//! cosine alignment terms, combined into the two composite variants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// Deepest aligned map is the reference; shallower maps are pooled down.
    V1,
    /// Shallowest aligned map is the reference; deeper maps are upsampled.
    #[default]
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub variant: LossVariant,
    pub smooth: f64,
    pub ce_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.5,
            variant: LossVariant::V2,
            smooth: 1e-6,
            ce_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.smooth > 0.0) || !(self.ce_eps > 0.0 && self.ce_eps < 0.5) {
            return Err(Error::Config("loss.smooth and loss.ce_eps must be small positive numbers".into()));
        }
        Ok(())
    }
}

/// How the compared map is brought to the reference resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Average-pool a finer map down.
    Down,
    /// Nearest-upsample a coarser map up.
    Up,
}

fn check_same(graph: &Graph, p: Var, gt: &Tensor) -> Result<()> {
    let ps = graph.value(p).shape();
    if ps != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {ps:?} vs ground truth {:?}",
            gt.shape()
        )));
    }
    Ok(())
}

pub fn dice_loss(graph: &mut Graph, probs: Var, gt: &Tensor, smooth: f64) -> Result<Var> {
    check_same(graph, probs, gt)?;
    Ok(graph.dice_loss(probs, gt.clone(), smooth))
}

pub fn ce_loss(graph: &mut Graph, probs: Var, gt: &Tensor, eps: f64) -> Result<Var> {
    check_same(graph, probs, gt)?;
    Ok(graph.bce_loss(probs, gt.clone(), eps))
}

/// `1 - cos` between the channel means of `y_ref` and the resampled `y_b`,
/// averaged over the batch. Degenerate (zero-norm) samples contribute 1.
pub fn cosine_align_loss(graph: &mut Graph, y_ref: Var, y_b: Var, mode: Resample) -> Result<Var> {
    let (na, _, ha, wa) = graph.value(y_ref).dims4();
    let (nb, _, hb, wb) = graph.value(y_b).dims4();
    if na != nb {
        return Err(Error::ShapeMismatch(format!("batch {na} vs {nb}")));
    }
    let a = graph.channel_mean(y_ref);
    let b = graph.channel_mean(y_b);
    let b = match mode {
        Resample::Down => {
            if hb < ha || hb % ha != 0 || wb % wa != 0 || hb / ha != wb / wa {
                return Err(Error::ShapeMismatch(format!("cannot pool {hb}x{wb} down to {ha}x{wa}")));
            }
            if hb == ha {
                b
            } else {
                graph.avg_pool(b, hb / ha)
            }
        }
        Resample::Up => {
            if ha < hb || ha % hb != 0 || wa % wb != 0 || ha / hb != wa / wb {
                return Err(Error::ShapeMismatch(format!("cannot upsample {hb}x{wb} to {ha}x{wa}")));
            }
            if hb == ha {
                b
            } else {
                graph.upsample(b, ha / hb, UpsampleMode::Nearest)
            }
        }
    };
    Ok(graph.cosine_loss(a, b))
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
    /// Terms weighted by alpha, beta, gamma respectively.
    pub cosine: [Var; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_dice: f64,
    pub l_ce: f64,
    pub cosine_terms: [f64; 3],
    pub total: f64,
    /// Samples that hit the zero-norm guard across the three cosine terms.
    pub degenerate: usize,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("dice", self.l_dice),
            ("cross-entropy", self.l_ce),
            ("cosine term 1", self.cosine_terms[0]),
            ("cosine term 2", self.cosine_terms[1]),
            ("cosine term 3", self.cosine_terms[2]),
            ("total", self.total),
        ];
        terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

impl LossNodes {
    pub fn bundle(&self, graph: &Graph) -> LossBundle {
        LossBundle {
            l_dice: graph.value(self.dice).item(),
            l_ce: graph.value(self.ce).item(),
            cosine_terms: self.cosine.map(|v| graph.value(v).item()),
            total: graph.value(self.total).item(),
            degenerate: self.cosine.iter().map(|&v| graph.cosine_degenerate(v)).sum(),
        }
    }
}

/// Reference/compared layer pairs (1-based) for the alpha, beta, gamma terms.
pub fn cosine_pairs(variant: LossVariant) -> [(usize, usize); 3] {
    match variant {
        LossVariant::V1 => [(4, 1), (4, 2), (4, 3)],
        LossVariant::V2 => [(1, 4), (1, 3), (1, 2)],
    }
}

/// `0.5 dice + 0.5 ce + alpha t1 + beta t2 + gamma t3`.
pub fn total_loss(graph: &mut Graph, probs: Var, gt: &Tensor, aligned: &[Var], cfg: &LossConfig) -> Result<LossNodes> {
    if aligned.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "composite loss needs exactly 4 aligned maps, got {}",
            aligned.len()
        )));
    }
    let dice = dice_loss(graph, probs, gt, cfg.smooth)?;
    let ce = ce_loss(graph, probs, gt, cfg.ce_eps)?;
    let mode = match cfg.variant {
        LossVariant::V1 => Resample::Down,
        LossVariant::V2 => Resample::Up,
    };
    let mut cosine = [dice; 3];
    for (slot, (r, b)) in cosine.iter_mut().zip(cosine_pairs(cfg.variant)) {
        *slot = cosine_align_loss(graph, aligned[r - 1], aligned[b - 1], mode)?;
    }
    let total = graph.weighted_sum(&[
        (dice, 0.5),
        (ce, 0.5),
        (cosine[0], cfg.alpha),
        (cosine[1], cfg.beta),
        (cosine[2], cfg.gamma),
    ]);
    Ok(LossNodes {
        total,
        dice,
        ce,
        cosine,
    })
}
