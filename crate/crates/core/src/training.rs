//! Adam training loop with periodic validation, early stopping on
//! validation Dice and best-state checkpointing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{AdamState, Checkpoint};
use crate::decoder::batch_logits_to_masks;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, LossConfig};
use crate::metrics::{EvalReport, SampleScore, SegmentationMask};
use crate::metrics::{dice_score, iou_score};
use crate::model::Model;
use crate::params::{apply_updates, Ctx, Mode, ParamId, ParamStore};
use crate::report_codec::{compile_report, TextVector};
use crate::synth_data::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimisation iterations.
    pub max_rounds: usize,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub threshold: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            max_rounds: 2000,
            early_stop_patience: 50,
            eval_every: 50,
            threshold: 0.5,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_rounds", self.max_rounds),
            ("early_stop_patience", self.early_stop_patience),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        self.loss.validate()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over the trainable parameters of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let ids: Vec<ParamId> = store.trainable().collect();
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        Self {
            lr,
            t: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    pub fn from_state(store: &ParamStore, lr: f64, state: &AdamState) -> Result<Self> {
        let mut adam = Self::new(store, lr);
        if state.m.len() != adam.ids.len() || state.v.len() != adam.ids.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        for (i, id) in adam.ids.iter().enumerate() {
            let name = store.name(*id);
            for (slot, (n, t)) in [(&mut adam.m[i], &state.m[i]), (&mut adam.v[i], &state.v[i])] {
                if n != name || t.shape() != store.get(*id).shape() {
                    return Err(Error::Checkpoint(format!("optimizer entry {n} does not match parameter {name}")));
                }
                *slot = t.clone();
            }
        }
        adam.t = state.t;
        Ok(adam)
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        let named = |ts: &[Tensor]| {
            self.ids
                .iter()
                .zip(ts)
                .map(|(id, t)| (store.name(*id).to_string(), t.clone()))
                .collect()
        };
        AdamState {
            t: self.t,
            m: named(&self.m),
            v: named(&self.v),
        }
    }

    /// One bias-corrected update; `grads` in the same order as `self.ids`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        assert_eq!(grads.len(), self.ids.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (k, (id, g)) in grads.iter().enumerate() {
            assert_eq!(*id, self.ids[k]);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Samples with compiled text vectors, ready for batching.
#[derive(Clone, Debug)]
pub struct Prepared<'a> {
    pub samples: &'a [Sample],
    pub texts: Vec<TextVector>,
    pub size: (usize, usize),
}

impl<'a> Prepared<'a> {
    pub fn new(samples: &'a [Sample], image_size: usize) -> Result<Self> {
        let mut texts = Vec::with_capacity(samples.len());
        for s in samples {
            let shape = s.image.shape();
            if shape != [image_size, image_size] || (s.mask.height(), s.mask.width()) != (image_size, image_size) {
                return Err(Error::DataShape(format!(
                    "sample {} is {shape:?}, model expects {image_size}x{image_size}",
                    s.id
                )));
            }
            texts.push(compile_report(&s.report)?);
        }
        Ok(Self {
            samples,
            texts,
            size: (image_size, image_size),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `([N,1,H,W] images, [N,1,H,W] masks, texts)`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<TextVector>) {
        let (h, w) = self.size;
        let mut img = Vec::with_capacity(idx.len() * h * w);
        let mut gt = Vec::with_capacity(idx.len() * h * w);
        for &i in idx {
            img.extend_from_slice(self.samples[i].image.data());
            gt.extend(self.samples[i].mask.pixels().iter().map(|&p| if p { 1.0 } else { 0.0 }));
        }
        let shape = [idx.len(), 1, h, w];
        (
            Tensor::from_vec(&shape, img),
            Tensor::from_vec(&shape, gt),
            idx.iter().map(|&i| self.texts[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub round: usize,
    pub loss: LossBundle,
    /// Validation `(dice, iou)` as fractions, on evaluation rounds.
    pub val: Option<(f64, f64)>,
}

pub const HISTORY_HEADER: &str = "round,loss_total,loss_dice,loss_ce,cos1,cos2,cos3,val_dice,val_iou";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, l.total, l.l_dice, l.l_ce, l.cosine_terms[0], l.cosine_terms[1], l.cosine_terms[2]
        );
        match r.val {
            Some((d, i)) => {
                let _ = writeln!(out, ",{d},{i}");
            }
            None => out.push_str(",,\n"),
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the best validation Dice (final state without validation data).
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub rounds_run: usize,
    pub stopped_early: bool,
}

/// Forward, loss and gradients for one batch. Returns the loss terms, the
/// parameter gradients and the running-statistic updates without touching
/// the store.
#[allow(clippy::type_complexity)]
pub fn loss_and_grads(
    model: &Model,
    store: &ParamStore,
    images: &Tensor,
    gt: &Tensor,
    texts: &[TextVector],
    loss_cfg: &LossConfig,
) -> Result<(LossBundle, Vec<(ParamId, Tensor)>, Vec<(ParamId, Tensor)>)> {
    let mut ctx = Ctx::new(Graph::new(), store, Mode::Train);
    let pass = model.forward(&mut ctx, images, texts)?;
    let aligned = pass.aligned();
    let nodes = total_loss(&mut ctx.graph, pass.probs, gt, &aligned, loss_cfg)?;
    let bundle = nodes.bundle(&ctx.graph);
    if let Some(term) = bundle.non_finite_term() {
        return Err(Error::NonFiniteLoss(format!("{term} is non-finite ({bundle:?})")));
    }
    let mut grads = ctx.graph.backward(nodes.total);
    let pg = ctx.param_grads(&mut grads);
    for (id, g) in &pg {
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss(format!("gradient of {} is non-finite", store.name(*id))));
        }
    }
    let updates = ctx.take_updates();
    Ok((bundle, pg, updates))
}

fn snapshot(store: &ParamStore, adam: &Adam, round: usize, best: f64, meta: &str, fingerprint: &str) -> Checkpoint {
    Checkpoint::capture(store, Some(adam.state(store)), round as u64, best, meta, fingerprint)
}

/// Train in place. `meta` and `fingerprint` are copied into checkpoints.
/// `observer` sees every history row as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    meta: &str,
    fingerprint: &str,
    observer: &mut dyn FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::DataShape("training set is empty".into()));
    }
    let train_data = Prepared::new(train_set, model.cfg.image_size)?;
    let val_data = Prepared::new(val_set, model.cfg.image_size)?;
    let mut adam = Adam::new(store, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C_u64);
    let batch = cfg.batch_size.min(train_data.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut history = Vec::with_capacity(cfg.max_rounds);
    let mut best_dice = f64::NEG_INFINITY;
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut rounds_run = 0;

    for round in 1..=cfg.max_rounds {
        if cursor + batch > order.len() {
            order = (0..train_data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let (images, gt, texts) = train_data.batch(idx);
        let (bundle, grads, updates) = loss_and_grads(model, store, &images, &gt, &texts, &cfg.loss)
            .map_err(|e| match e {
                Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!("round {round}: {m}")),
                e => e,
            })?;
        apply_updates(store, updates);
        adam.step(store, &grads);
        rounds_run = round;

        let mut row = HistoryRow {
            round,
            loss: bundle,
            val: None,
        };
        let eval_round = round % cfg.eval_every == 0 || round == cfg.max_rounds;
        if eval_round && !val_data.is_empty() {
            let report = evaluate_prepared(model, store, &val_data, cfg.threshold)?;
            let (d, i) = (report.dice / 100.0, report.iou / 100.0);
            row.val = Some((d, i));
            if d > best_dice {
                best_dice = d;
                stale = 0;
                best = Some(snapshot(store, &adam, round, d, meta, fingerprint));
            } else {
                stale += 1;
            }
        }
        observer(&row);
        history.push(row);
        if stale >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let best = match best {
        Some(b) => b,
        None => snapshot(store, &adam, rounds_run, f64::NAN, meta, fingerprint),
    };
    Ok(TrainOutcome {
        best,
        history,
        rounds_run,
        stopped_early,
    })
}

pub const EVAL_BATCH: usize = 8;

fn evaluate_prepared(model: &Model, store: &ParamStore, data: &Prepared, threshold: f64) -> Result<EvalReport> {
    let masks = predict_prepared(model, store, data, threshold)?;
    let mut scores = Vec::with_capacity(masks.len());
    for (s, m) in data.samples.iter().zip(&masks) {
        scores.push(SampleScore {
            id: s.id.clone(),
            dice: 100.0 * dice_score(m, &s.mask)?,
            iou: 100.0 * iou_score(m, &s.mask)?,
        });
    }
    Ok(EvalReport::from_scores(scores))
}

fn predict_prepared(model: &Model, store: &ParamStore, data: &Prepared, threshold: f64) -> Result<Vec<SegmentationMask>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _, texts) = data.batch(chunk);
        let logits = model.predict_logits(store, &images, &texts)?;
        out.extend(batch_logits_to_masks(&logits, threshold));
    }
    Ok(out)
}

/// Eval-mode scores with running normalisation statistics.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let data = Prepared::new(samples, model.cfg.image_size)?;
    evaluate_prepared(model, store, &data, threshold)
}

/// Eval-mode masks, one per sample.
pub fn predict(model: &Model, store: &ParamStore, samples: &[Sample], threshold: f64) -> Result<Vec<SegmentationMask>> {
    let data = Prepared::new(samples, model.cfg.image_size)?;
    predict_prepared(model, store, &data, threshold)
}
