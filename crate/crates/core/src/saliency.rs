//! Grad-CAM over decoder stage activations.
//!
//! The target scalar is the sum of logits over the pixels the model itself
//! predicts as lesion. Channel weights are spatial means of the target's
//! gradient with respect to a stage activation; the map is the ReLU of the
//! weighted channel sum, divided by its maximum.

use std::path::Path;

use crate::autodiff::Graph;
use crate::decoder::logits_to_mask;
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::Model;
use crate::params::{Ctx, Mode, ParamStore};
use crate::report_codec::TextVector;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Decoder stage (1-based, same numbering as the encoder stages).
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    /// The raw map was identically zero and is returned as is.
    pub zero: bool,
    /// Side of the input image the map refers to.
    pub image_size: usize,
}

impl SaliencyMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Fraction of the map's mass in cells that intersect the inclusive pixel
    /// box `(y0, x0, y1, x1)` grown by `dilation` pixels on every side.
    pub fn mass_in_box(&self, bbox: (usize, usize, usize, usize), dilation: usize) -> f64 {
        self.mass_in_boxes(&[bbox], dilation)
    }

    /// As [`Self::mass_in_box`] for the union of several boxes.
    pub fn mass_in_boxes(&self, boxes: &[(usize, usize, usize, usize)], dilation: usize) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let last = self.image_size - 1;
        let grown: Vec<_> = boxes
            .iter()
            .map(|&(y0, x0, y1, x1)| {
                (
                    y0.saturating_sub(dilation),
                    x0.saturating_sub(dilation),
                    (y1 + dilation).min(last),
                    (x1 + dilation).min(last),
                )
            })
            .collect();
        let sy = self.image_size / self.height;
        let sx = self.image_size / self.width;
        let mut inside = 0.0;
        for cy in 0..self.height {
            let (py0, py1) = (cy * sy, (cy + 1) * sy - 1);
            for cx in 0..self.width {
                let (px0, px1) = (cx * sx, (cx + 1) * sx - 1);
                let hit = grown
                    .iter()
                    .any(|&(y0, x0, y1, x1)| py1 >= y0 && py0 <= y1 && px1 >= x0 && px0 <= x1);
                if hit {
                    inside += self.values[cy * self.width + cx];
                }
            }
        }
        inside / total
    }

    /// Nearest-upsampled to the image side.
    pub fn upsampled(&self) -> Vec<f64> {
        let n = self.image_size;
        let (sy, sx) = (n / self.height, n / self.width);
        (0..n * n)
            .map(|i| self.values[(i / n / sy) * self.width + (i % n) / sx])
            .collect()
    }
}

/// Piecewise-linear blue, cyan, yellow, red ramp.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let x = v * 3.0;
    let i = (x.floor() as usize).min(2);
    let t = x - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn normalise(raw: Vec<f64>) -> (Vec<f64>, bool) {
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        (raw, true)
    } else {
        (raw.into_iter().map(|v| v / max).collect(), false)
    }
}

/// Maps for every decoder stage from one backward pass. `image` is `[H, W]`
/// or `[1, C, H, W]`.
pub fn grad_cam_all(model: &Model, store: &ParamStore, image: &Tensor, text: &TextVector, threshold: f64) -> Result<Vec<SaliencyMap>> {
    let n = model.cfg.image_size;
    let images = match image.shape() {
        [h, w] => image.clone().reshape(&[1, 1, *h, *w]),
        [1, _, _, _] => image.clone(),
        s => return Err(Error::DataShape(format!("expected one image, got shape {s:?}"))),
    };
    let mut ctx = Ctx::new(Graph::new(), store, Mode::Eval);
    let pass = model.forward(&mut ctx, &images, &[*text])?;
    let logits = ctx.graph.value(pass.logits).clone();
    let mask = logits_to_mask(&logits, threshold).to_tensor().reshape(logits.shape());
    let target = ctx.graph.dot_const(pass.logits, mask);
    let grads = ctx.graph.backward(target);
    let mut maps = Vec::with_capacity(pass.decoder.activations.len());
    for (i, &act) in pass.decoder.activations.iter().enumerate() {
        let a = ctx.graph.value(act);
        let (_, c, h, w) = a.dims4();
        let hw = h * w;
        let zeros = Tensor::zeros(a.shape());
        let g = grads.get(act).unwrap_or(&zeros);
        let mut raw = vec![0.0; hw];
        for ch in 0..c {
            let gs = &g.data()[ch * hw..(ch + 1) * hw];
            let weight = gs.iter().sum::<f64>() / hw as f64;
            for (r, v) in raw.iter_mut().zip(&a.data()[ch * hw..(ch + 1) * hw]) {
                *r += weight * v;
            }
        }
        let (values, zero) = normalise(raw.into_iter().map(|v| v.max(0.0)).collect());
        maps.push(SaliencyMap {
            stage: i + 1,
            height: h,
            width: w,
            values,
            zero,
            image_size: n,
        });
    }
    Ok(maps)
}

pub fn grad_cam(model: &Model, store: &ParamStore, image: &Tensor, text: &TextVector, stage: usize, threshold: f64) -> Result<SaliencyMap> {
    let stages = model.decoder.num_stages();
    if stage == 0 || stage > stages {
        return Err(Error::InvalidStage { stage, stages });
    }
    let mut maps = grad_cam_all(model, store, image, text, threshold)?;
    Ok(maps.swap_remove(stage - 1))
}

/// Colour heatmap at image resolution.
pub fn write_heatmap(path: &Path, map: &SaliencyMap) -> Result<()> {
    let n = map.image_size;
    let rgb: Vec<[f64; 3]> = map.upsampled().into_iter().map(colormap).collect();
    imageio::write_rgb(path, n, n, &rgb)
}

/// Half-and-half blend of the grayscale image and the heatmap.
pub fn write_overlay(path: &Path, image: &Tensor, map: &SaliencyMap) -> Result<()> {
    let n = map.image_size;
    let rgb: Vec<[f64; 3]> = map
        .upsampled()
        .into_iter()
        .zip(image.data())
        .map(|(v, &g)| {
            let c = colormap(v);
            [0.5 * g + 0.5 * c[0], 0.5 * g + 0.5 * c[1], 0.5 * g + 0.5 * c[2]]
        })
        .collect();
    imageio::write_rgb(path, n, n, &rgb)
}
