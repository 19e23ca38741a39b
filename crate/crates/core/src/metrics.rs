//! Overlap metrics over binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Self {
        assert_eq!(pixels.len(), height * width, "mask size mismatch");
        Self { height, width, pixels }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    /// Pixels `> 0.5` are foreground.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self::new(h, w, t.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|p| **p).count()
    }

    /// `[H, W]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.pixels.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect(),
        )
    }
}

fn overlap(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(usize, usize, usize)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let inter = pred.pixels.iter().zip(&gt.pixels).filter(|(a, b)| **a && **b).count();
    Ok((inter, pred.count(), gt.count()))
}

/// `2|P n G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P n G| / |P u G|`; two empty masks score 1.
pub fn iou_score(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let (i, p, g) = overlap(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub iou: f64,
}

/// Dataset-level scores as the mean of per-sample scores, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub iou: f64,
    pub per_sample: Vec<SampleScore>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_masks<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a SegmentationMask, &'a SegmentationMask)>,
    ) -> Result<Self> {
        let mut per_sample = Vec::new();
        for (id, pred, gt) in pairs {
            per_sample.push(SampleScore {
                id: id.to_string(),
                dice: 100.0 * dice_score(pred, gt)?,
                iou: 100.0 * iou_score(pred, gt)?,
            });
        }
        Ok(Self::from_scores(per_sample))
    }

    pub fn from_scores(per_sample: Vec<SampleScore>) -> Self {
        let n = per_sample.len();
        let mean = |f: fn(&SampleScore) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_sample.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            dice: mean(|s| s.dice),
            iou: mean(|s| s.iou),
            n_samples: n,
            per_sample,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per sample followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,iou\n");
        for s in &self.per_sample {
            out.push_str(&format!("{},{},{}\n", s.id, s.dice, s.iou));
        }
        out.push_str(&format!("mean,{},{}\n", self.dice, self.iou));
        out
    }
}
