//! Central finite-difference checks of tape gradients.
//!
//! When a perturbation `theta +- h` changes which branch a piecewise op
//! takes, the perturbed loss is recomputed with the unperturbed branch
//! pattern replayed so both sides of the difference stay on one smooth
//! piece.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Elements checked per tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            per_tensor: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    /// Tensors with at least one checked element.
    pub tensors: usize,
    /// Perturbed evaluations that needed branch replay.
    pub replayed: usize,
    pub worst: Option<Discrepancy>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |d| d.rel_err)
    }

    fn record(&mut self, d: Discrepancy) {
        self.checked += 1;
        if self.worst.as_ref().is_none_or(|w| d.rel_err > w.rel_err) {
            self.worst = Some(d);
        }
    }
}

/// A loss builder: gets a context and one leaf per input tensor.
pub trait LossFn: Fn(&mut Ctx, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Ctx, &[Var]) -> Result<Var>> LossFn for F {}

fn evaluate(store: &ParamStore, inputs: &[Tensor], f: &impl LossFn, graph: Graph, mode: Mode) -> Result<(f64, Graph)> {
    let mut ctx = Ctx::new(graph, store, mode);
    let leaves: Vec<Var> = inputs.iter().map(|t| ctx.graph.leaf(t.clone(), true)).collect();
    let loss = f(&mut ctx, &leaves)?;
    let v = ctx.graph.value(loss).item();
    Ok((v, ctx.graph))
}

fn pick(rng: &mut ChaCha8Rng, len: usize, per: Option<usize>) -> Vec<usize> {
    match per {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compare analytic and central-difference gradients of `f` with respect to
/// every trainable parameter of `store` and every tensor in `inputs`.
pub fn check(store: &ParamStore, inputs: &[Tensor], f: impl LossFn, opts: &CheckOptions) -> Result<CheckReport> {
    let mut ctx = Ctx::new(Graph::recording(), store, opts.mode);
    let leaves: Vec<Var> = inputs.iter().map(|t| ctx.graph.leaf(t.clone(), true)).collect();
    let loss = f(&mut ctx, &leaves)?;
    let mut grads = ctx.graph.backward(loss);
    let log = ctx.graph.branch_log().expect("recording graph").clone();
    let input_grads: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = ctx.param_grads(&mut grads);
    drop(ctx);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport::default();
    let h = opts.step;

    let eval_at = |st: &ParamStore, ins: &[Tensor], report: &mut CheckReport| -> Result<f64> {
        let (v, g) = evaluate(st, ins, &f, Graph::recording(), opts.mode)?;
        if g.branch_log() == Some(&log) {
            return Ok(v);
        }
        report.replayed += 1;
        Ok(evaluate(st, ins, &f, Graph::replaying(log.clone()), opts.mode)?.0)
    };

    let mut work = store.clone();
    for (id, g) in &param_grads {
        let idx = pick(&mut rng, g.numel(), opts.per_tensor);
        if !idx.is_empty() {
            report.tensors += 1;
        }
        for i in idx {
            let orig = work.get(*id).data()[i];
            work.get_mut(*id).data_mut()[i] = orig + h;
            let lp = eval_at(&work, inputs, &mut report)?;
            work.get_mut(*id).data_mut()[i] = orig - h;
            let lm = eval_at(&work, inputs, &mut report)?;
            work.get_mut(*id).data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.data()[i];
            report.record(Discrepancy {
                tensor: store.name(*id).to_string(),
                index: i,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
    }

    let mut ins = inputs.to_vec();
    for (k, g) in input_grads.iter().enumerate() {
        let idx = pick(&mut rng, g.numel(), opts.per_tensor);
        if !idx.is_empty() {
            report.tensors += 1;
        }
        for i in idx {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + h;
            let lp = eval_at(store, &ins, &mut report)?;
            ins[k].data_mut()[i] = orig - h;
            let lm = eval_at(store, &ins, &mut report)?;
            ins[k].data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.data()[i];
            report.record(Discrepancy {
                tensor: format!("input{k}"),
                index: i,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
    }
    Ok(report)
}
