mod common;

use std::time::Instant;

use c2fvl::autodiff::{Graph, UpsampleMode, Var};
use c2fvl::encoder::{AttentionConfig, Encoder, StageConfig};
use c2fvl::gradcheck::{check, CheckOptions};
use c2fvl::losses::LossVariant;
use c2fvl::model::{GateOrder, Model, ModelConfig};
use c2fvl::params::{Ctx, Mode, ParamStore};
use c2fvl::report_codec::TextVector;
use c2fvl::vl_aggregation::TextMode;
use c2fvl::{Error, Tensor};
use common::{batch, model_with, rng, tiny_model, uniform};

#[test]
fn composite_loss_gradients_v1_v2() {
    let start = Instant::now();
    for variant in [LossVariant::V1, LossVariant::V2] {
        let (report, degenerate) = common::grad::composite_loss(variant);
        assert_eq!(degenerate, 0, "cosine path must be exercised");
        assert!(report.max_rel_err() < 1e-4, "{variant:?}: {:?}", report.worst);
    }
    assert!(start.elapsed().as_secs() < 120);
}

fn two_stage_encoder(store: &mut ParamStore) -> Encoder {
    let cfgs = [(1, 8, 8), (8, 16, 4)]
        .iter()
        .enumerate()
        .map(|(i, &(cin, c, side))| StageConfig {
            index: i + 1,
            in_channels: cin,
            out_channels: c,
            out_dims: (side, side),
            attention: AttentionConfig {
                num_heads: 2,
                token_patch: if side % 2 == 0 { 2 } else { 1 },
                mlp_ratio: 2.0,
                embed_dim: c,
            },
        })
        .collect();
    Encoder::new(store, cfgs, UpsampleMode::Nearest, &mut rng(4)).unwrap()
}

#[test]
fn two_stage_encoder_gradients_every_element() {
    let mut store = ParamStore::new();
    let enc = two_stage_encoder(&mut store);
    // Weighted means keep the loss O(1), so roundoff stays far below the
    // tolerance for gradients that are exactly zero.
    let image = uniform(&mut rng(8), &[2, 1, 16, 16], 0.0, 1.0);
    let w1 = uniform(&mut rng(9), &[2, 8, 8, 8], -1.0, 1.0).map(|v| v / 1024.0);
    let w2 = uniform(&mut rng(10), &[2, 16, 4, 4], -1.0, 1.0).map(|v| v / 512.0);
    let f = |ctx: &mut Ctx, v: &[Var]| {
        let p = enc.encode_pyramid(ctx, v[0])?;
        let a = ctx.graph.dot_const(p.stages[0].encoder, w1.clone());
        let b = ctx.graph.dot_const(p.stages[1].encoder, w2.clone());
        Ok(ctx.graph.add(a, b))
    };
    let report = check(&store, &[image], f, &CheckOptions::default()).unwrap();
    assert_eq!(report.checked, store.trainable_len() + 512);
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst);
}

#[test]
fn eval_mode_gradients() {
    let (model, store) = tiny_model(2);
    let (images, _, texts) = batch(16, 1, 3);
    let w = uniform(&mut rng(4), &[1, 1, 16, 16], -1.0, 1.0).map(|v| v / 256.0);
    let f = |ctx: &mut Ctx, _: &[Var]| {
        let pass = model.forward(ctx, &images, &texts)?;
        Ok(ctx.graph.dot_const(pass.logits, w.clone()))
    };
    let opts = CheckOptions {
        per_tensor: Some(4),
        mode: Mode::Eval,
        ..CheckOptions::default()
    };
    let r = check(&store, &[], f, &opts).unwrap();
    assert!(r.max_rel_err() < 1e-4, "{:?}", r.worst);
}

#[test]
fn shapes_through_the_pipeline() {
    let (model, store) = tiny_model(0);
    let (images, _, texts) = batch(16, 3, 1);
    let mut ctx = Ctx::new(Graph::new(), &store, Mode::Train);
    let pass = model.forward(&mut ctx, &images, &texts).unwrap();
    let maps = pass.pyramid.materialize(&ctx.graph);
    let want = [(8, 8), (16, 4), (24, 2), (32, 1)];
    for (m, (c, side)) in maps.iter().zip(want) {
        for t in [&m.cnn, &m.rt, &m.encoder] {
            assert_eq!(t.shape(), &[3, c, side, side]);
        }
    }
    for (skip, (c, side)) in pass.skips.iter().zip(want) {
        assert_eq!(ctx.graph.value(*skip).shape(), &[3, c, side, side]);
    }
    let widths = [4, 8, 16, 24];
    for (i, a) in pass.decoder.activations.iter().enumerate() {
        assert_eq!(ctx.graph.value(*a).shape(), &[3, widths[i], want[i].1, want[i].1]);
    }
    assert_eq!(ctx.graph.value(pass.logits).shape(), &[3, 1, 16, 16]);
    let p = ctx.graph.value(pass.probs);
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn default_model_size_and_shape() {
    let (model, store) = Model::new(ModelConfig::default(), &mut rng(0)).unwrap();
    assert!(store.trainable_len() > 100_000);
    let (images, _, texts) = batch(64, 1, 0);
    let logits = model.predict_logits(&store, &images, &texts).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 64, 64]);
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let (model, store) = tiny_model(0);
    let err = model.predict_logits(&store, &Tensor::zeros(&[1, 1, 12, 12]), &[TextVector::zero()]).unwrap_err();
    assert!(matches!(err, Error::DataShape(_)));
    let err = model.predict_logits(&store, &Tensor::zeros(&[2, 1, 16, 16]), &[TextVector::zero()]).unwrap_err();
    assert!(matches!(err, Error::DataShape(_)));
    let bad = ModelConfig {
        channels: vec![8, 12, 24, 32],
        ..ModelConfig::tiny()
    };
    assert!(matches!(Model::new(bad, &mut rng(0)), Err(Error::ChannelsNotDivisibleBy8(12))));
    let bad = ModelConfig {
        vlab_reduction: 3,
        ..ModelConfig::tiny()
    };
    assert!(matches!(Model::new(bad, &mut rng(0)), Err(Error::ReductionNotDividing { .. })));
    let bad = ModelConfig {
        image_size: 24,
        ..ModelConfig::tiny()
    };
    assert!(matches!(Model::new(bad, &mut rng(0)), Err(Error::Config(_))));
}

fn skips_for(cfg: ModelConfig, text: TextVector) -> (Vec<Tensor>, Vec<Tensor>) {
    let (model, store) = model_with(cfg, 6);
    let (images, _, _) = batch(16, 1, 2);
    let mut ctx = Ctx::inference(&store);
    let pass = model.forward(&mut ctx, &images, &[text]).unwrap();
    let enc = pass.pyramid.stages.iter().map(|s| ctx.graph.value(s.encoder).clone()).collect();
    let vl: Vec<Tensor> = match model.cfg.gate_order {
        GateOrder::GateThenVlab => pass.vlab.iter().map(|o| ctx.graph.value(o.y).clone()).collect(),
        GateOrder::VlabThenGate => pass.skips.iter().map(|s| ctx.graph.value(*s).clone()).collect(),
    };
    (enc, vl)
}

#[test]
fn all_ones_text_is_transparent_and_zero_text_silences_skips() {
    // Gate then align: the all-ones run must match an ungated run exactly.
    let gated = ModelConfig::tiny();
    let ungated = ModelConfig {
        text_mode: TextMode::Single,
        ..ModelConfig::tiny()
    };
    let (_, ones) = skips_for(gated.clone(), TextVector::ones());
    let (_, plain) = skips_for(ungated, TextVector::ones());
    // Single mode gates only the deepest stage; the shallower ones must agree
    // with the all-ones multi-stage run bit for bit.
    for i in 0..3 {
        assert_eq!(ones[i].data(), plain[i].data());
    }
    let (_, zero) = skips_for(gated, TextVector::zero());
    for z in &zero {
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
    let after = ModelConfig {
        gate_order: GateOrder::VlabThenGate,
        ..ModelConfig::tiny()
    };
    let (_, zero) = skips_for(after, TextVector::zero());
    for z in &zero {
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_is_deterministic() {
    let (a, sa) = tiny_model(9);
    let (b, sb) = tiny_model(9);
    let (images, _, texts) = batch(16, 2, 4);
    let la = a.predict_logits(&sa, &images, &texts).unwrap();
    let lb = b.predict_logits(&sb, &images, &texts).unwrap();
    assert_eq!(la.data(), lb.data());
}
