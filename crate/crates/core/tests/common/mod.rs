#![allow(dead_code)]

use c2fvl::model::{Model, ModelConfig};
use c2fvl::params::ParamStore;
use c2fvl::report_codec::{compile_report, TextVector};
use c2fvl::synth_data::{generate_dataset, Sample, SyntheticSpec};
use c2fvl::training::Prepared;
use c2fvl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

pub fn tiny_model(seed: u64) -> (Model, ParamStore) {
    Model::new(ModelConfig::tiny(), &mut rng(seed)).unwrap()
}

pub fn model_with(cfg: ModelConfig, seed: u64) -> (Model, ParamStore) {
    Model::new(cfg, &mut rng(seed)).unwrap()
}

/// Synthetic samples at `size`, drawn with master seed `seed`.
pub fn samples(size: usize, n: usize, seed: u64) -> Vec<Sample> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::for_size(size)
    };
    generate_dataset(&spec, n, 0, 0).unwrap().0.train
}

/// `(images, gt, texts)` for the first `n` synthetic samples.
pub fn batch(size: usize, n: usize, seed: u64) -> (Tensor, Tensor, Vec<TextVector>) {
    let s = samples(size, n, seed);
    let p = Prepared::new(&s, size).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    p.batch(&idx)
}

pub fn text(report: &str) -> TextVector {
    compile_report(report).unwrap()
}

/// Largest relative deviation, `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub mod codec;
pub mod oracle;

pub mod grad {
    use c2fvl::gradcheck::{check, CheckOptions, CheckReport};
    use c2fvl::losses::{total_loss, LossConfig, LossVariant};
    use c2fvl::params::{Ctx, Mode};
    use c2fvl::autodiff::Var;

    pub const ELEMENTS_PER_TENSOR: usize = 12;

    /// Central-difference check of the composite loss of the tiny
    /// four-stage model with respect to every trainable tensor.
    pub fn composite_loss(variant: LossVariant) -> (CheckReport, usize) {
        let (model, store) = super::tiny_model(3);
        let (images, gt, texts) = super::batch(16, 2, 5);
        let cfg = LossConfig {
            variant,
            ..LossConfig::default()
        };
        let mut degenerate = 0;
        {
            let mut ctx = Ctx::new(c2fvl::autodiff::Graph::new(), &store, Mode::Train);
            let pass = model.forward(&mut ctx, &images, &texts).unwrap();
            let nodes = total_loss(&mut ctx.graph, pass.probs, &gt, &pass.aligned(), &cfg).unwrap();
            degenerate += nodes.bundle(&ctx.graph).degenerate;
        }
        let f = |ctx: &mut Ctx, _: &[Var]| {
            let pass = model.forward(ctx, &images, &texts)?;
            let aligned = pass.aligned();
            Ok(total_loss(&mut ctx.graph, pass.probs, &gt, &aligned, &cfg)?.total)
        };
        let opts = CheckOptions {
            per_tensor: Some(ELEMENTS_PER_TENSOR),
            seed: 7,
            ..CheckOptions::default()
        };
        let report = check(&store, &[], f, &opts).unwrap();
        assert_eq!(report.tensors, store.trainable().count());
        (report, degenerate)
    }
}
