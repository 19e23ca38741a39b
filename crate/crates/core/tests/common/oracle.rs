//! Straight-line reimplementations of the alignment block, the composite
//! loss and the reconstruct-and-fuse step, compared on random inputs.

use c2fvl::autodiff::{Graph, UpsampleMode};
use c2fvl::encoder::{AttentionConfig, EncoderStage, StageConfig};
use c2fvl::losses::{total_loss, LossConfig, LossVariant};
use c2fvl::nn::{Conv2d, Linear};
use c2fvl::params::{Ctx, Mode, ParamStore};
use c2fvl::vlab::{vlab_forward, VlabParams};
use c2fvl::Tensor;
use rand::Rng;

use super::{max_rel, rng, uniform};

/// Flat NCHW accessor.
struct Map<'a> {
    d: &'a [f64],
    c: usize,
    h: usize,
    w: usize,
}

impl Map<'_> {
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        for v in store.get_mut(id).data_mut() {
            *v = if name.ends_with("running_var") { rng.gen_range(0.5..2.0) } else { rng.gen_range(-1.0..1.0) };
        }
    }
}

fn conv1x1(store: &ParamStore, conv: &Conv2d, x: &[f64], n: usize, cin: usize, hw: usize) -> Vec<f64> {
    let w = store.get(conv.weight).data();
    let b = store.get(conv.bias).data();
    let cout = b.len();
    let mut out = vec![0.0; n * cout * hw];
    for s in 0..n {
        for o in 0..cout {
            for p in 0..hw {
                let mut acc = b[o];
                for i in 0..cin {
                    acc += w[o * cin + i] * x[(s * cin + i) * hw + p];
                }
                out[(s * cout + o) * hw + p] = acc;
            }
        }
    }
    out
}

fn dense(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight).data();
    let b = store.get(l.bias).data();
    let fin = x.len();
    (0..b.len()).map(|o| b[o] + (0..fin).map(|i| w[o * fin + i] * x[i]).sum::<f64>()).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn vlab_oracle(store: &ParamStore, p: &VlabParams, x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let hid = c / p.reduction;
    let a = conv1x1(store, &p.mlp_avg.fc2, &relu(conv1x1(store, &p.mlp_avg.fc1, x.data(), n, c, hw)), n, hid, hw);
    let m = conv1x1(store, &p.mlp_max.fc2, &relu(conv1x1(store, &p.mlp_max.fc1, x.data(), n, c, hw)), n, hid, hw);
    let mut out = vec![0.0; x.numel()];
    for s in 0..n {
        let mut pooled = vec![0.0; c];
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let avg = a[base..base + hw].iter().sum::<f64>() / hw as f64;
            let max = m[base..base + hw].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            pooled[ch] = avg + max;
        }
        let scale = dense(store, &p.mlp_out.fc2, &relu(dense(store, &p.mlp_out.fc1, &pooled)));
        for ch in 0..c {
            for q in 0..hw {
                let i = (s * c + ch) * hw + q;
                out[i] = scale[ch] * x.data()[i];
            }
        }
    }
    out
}

/// Worst relative deviation of `vlab_forward` over `trials` random cases.
pub fn vlab_worst(trials: usize) -> f64 {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let c = [8, 16, 24][trial % 3];
        let share = trial % 2 == 0;
        let mut store = ParamStore::new();
        let p = VlabParams::new(&mut store, "vlab", c, 4, share, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let n = 1 + trial % 3;
        let side = 1 + trial % 5;
        let x = uniform(&mut r, &[n, c, side, side], -2.0, 2.0);
        let mut ctx = Ctx::new(Graph::new(), &store, Mode::Train);
        let xv = ctx.graph.constant(x.clone());
        let out = vlab_forward(&mut ctx, xv, &p).unwrap();
        let got = ctx.graph.value(out.y).data().to_vec();
        worst = worst.max(max_rel(&got, &vlab_oracle(&store, &p, &x), 1e-12));
    }
    worst
}

fn dice_ce_oracle(p: &[f64], g: &[f64], smooth: f64, eps: f64) -> (f64, f64) {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * inter + smooth) / (p.iter().sum::<f64>() + g.iter().sum::<f64>() + smooth);
    let ce = -p
        .iter()
        .zip(g)
        .map(|(&a, &b)| {
            let a = a.clamp(eps, 1.0 - eps);
            b * a.ln() + (1.0 - b) * (1.0 - a).ln()
        })
        .sum::<f64>()
        / p.len() as f64;
    (dice, ce)
}

/// Per-sample channel mean `[N][H*W]`.
fn channel_means(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, c, h, w) = t.dims4();
    let m = Map { d: t.data(), c, h, w };
    (0..n)
        .map(|s| {
            let mut v = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    v.push((0..c).map(|ch| m.at(s, ch, y, x)).sum::<f64>() / c as f64);
                }
            }
            v
        })
        .collect()
}

fn avg_pool(v: &[f64], side: usize, k: usize) -> Vec<f64> {
    let o = side / k;
    let mut out = vec![0.0; o * o];
    for y in 0..side {
        for x in 0..side {
            out[(y / k) * o + x / k] += v[y * side + x] / (k * k) as f64;
        }
    }
    out
}

fn nearest_up(v: &[f64], side: usize, f: usize) -> Vec<f64> {
    let o = side * f;
    (0..o * o).map(|i| v[(i / o / f) * side + (i % o) / f]).collect()
}

fn one_minus_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

fn total_oracle(p: &Tensor, gt: &Tensor, maps: &[Tensor; 4], cfg: &LossConfig) -> (f64, [f64; 3]) {
    let (dice, ce) = dice_ce_oracle(p.data(), gt.data(), cfg.smooth, cfg.ce_eps);
    let means: Vec<Vec<Vec<f64>>> = maps.iter().map(channel_means).collect();
    let sides: Vec<usize> = maps.iter().map(|m| m.shape()[2]).collect();
    let n = p.shape()[0];
    let pairs = match cfg.variant {
        LossVariant::V1 => [(3, 0), (3, 1), (3, 2)],
        LossVariant::V2 => [(0, 3), (0, 2), (0, 1)],
    };
    let mut terms = [0.0; 3];
    for (t, (r, b)) in terms.iter_mut().zip(pairs) {
        for s in 0..n {
            let a = &means[r][s];
            let bm = match cfg.variant {
                LossVariant::V1 => avg_pool(&means[b][s], sides[b], sides[b] / sides[r]),
                LossVariant::V2 => nearest_up(&means[b][s], sides[b], sides[r] / sides[b]),
            };
            *t += one_minus_cos(a, &bm) / n as f64;
        }
    }
    let total = 0.5 * dice + 0.5 * ce + cfg.alpha * terms[0] + cfg.beta * terms[1] + cfg.gamma * terms[2];
    (total, terms)
}

/// Worst relative deviation of the total and cosine terms of `total_loss`.
pub fn total_loss_worst(variant: LossVariant, trials: usize) -> f64 {
    let mut r = rng(12 + variant as u64);
    let mut worst: f64 = 0.0;
    {
        for trial in 0..trials {
            let n = 1 + trial % 3;
            let size = 16;
            let p = uniform(&mut r, &[n, 1, size, size], 0.0, 1.0);
            let gt = uniform(&mut r, &[n, 1, size, size], 0.0, 1.0).map(|v| f64::from(v > 0.7));
            let maps = [
                uniform(&mut r, &[n, 8, 8, 8], -1.0, 2.0),
                uniform(&mut r, &[n, 16, 4, 4], -1.0, 2.0),
                uniform(&mut r, &[n, 24, 2, 2], -1.0, 2.0),
                uniform(&mut r, &[n, 32, 1, 1], -1.0, 2.0),
            ];
            let cfg = LossConfig {
                alpha: r.gen_range(0.0..1.0),
                beta: r.gen_range(0.0..1.0),
                gamma: r.gen_range(0.0..1.0),
                variant,
                ..LossConfig::default()
            };
            let mut g = Graph::new();
            let pv = g.constant(p.clone());
            let aligned: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
            let nodes = total_loss(&mut g, pv, &gt, &aligned, &cfg).unwrap();
            let b = nodes.bundle(&g);
            let (total, terms) = total_oracle(&p, &gt, &maps, &cfg);
            worst = worst.max(max_rel(&[b.total], &[total], 1e-12));
            worst = worst.max(max_rel(&b.cosine_terms, &terms, 1e-12));
        }
    }
    worst
}

fn stage(c: usize, side: usize, embed: usize, r: &mut impl Rng) -> (EncoderStage, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = StageConfig {
        index: 1,
        in_channels: 1,
        out_channels: c,
        out_dims: (side, side),
        attention: AttentionConfig {
            num_heads: 2,
            token_patch: 2,
            mlp_ratio: 2.0,
            embed_dim: embed,
        },
    };
    let st = EncoderStage::new(&mut store, cfg, UpsampleMode::Nearest, r).unwrap();
    (st, store)
}

/// `F_cnn + ReLU(BN(Conv1x1(Up(F_vit))))`, BN over batch statistics or the
/// stored running statistics.
fn fuse_oracle(store: &ParamStore, st: &EncoderStage, vit: &Tensor, cnn: &Tensor, batch_stats: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d, vh, _) = vit.dims4();
    let (_, c, h, w) = cnn.dims4();
    let f = h / vh;
    let vm = Map { d: vit.data(), c: d, h: vh, w: vh };
    let mut up = vec![0.0; n * d * h * w];
    for s in 0..n {
        for ch in 0..d {
            for y in 0..h {
                for x in 0..w {
                    up[((s * d + ch) * h + y) * w + x] = vm.at(s, ch, y / f, x / f);
                }
            }
        }
    }
    let hw = h * w;
    let z = conv1x1(store, &st.reconstruct.conv, &up, n, d, hw);
    let bn = &st.reconstruct.bn;
    let gamma = store.get(bn.gamma).data();
    let beta = store.get(bn.beta).data();
    let mut rt = vec![0.0; z.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|s| z[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec()).collect();
        let (mean, var) = if batch_stats {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
        } else {
            (store.get(bn.running_mean).data()[ch], store.get(bn.running_var).data()[ch])
        };
        for s in 0..n {
            for q in 0..hw {
                let i = (s * c + ch) * hw + q;
                rt[i] = (gamma[ch] * (z[i] - mean) / (var + 1e-5).sqrt() + beta[ch]).max(0.0);
            }
        }
    }
    let enc = rt.iter().zip(cnn.data()).map(|(a, b)| a + b).collect();
    (rt, enc)
}

/// Worst relative deviation of `reconstruct_fuse` in train and eval mode.
pub fn fuse_worst(trials: usize) -> f64 {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let c = [8, 16][trial % 2];
        let side = [4, 8][(trial / 2) % 2];
        let embed = [c, 8][(trial / 4) % 2];
        let (st, mut store) = stage(c, side, embed, &mut r);
        randomize(&mut store, &mut r);
        let n = 1 + trial % 3;
        let vs = side / 2;
        let vit = uniform(&mut r, &[n, embed, vs, vs], -1.0, 1.0);
        let cnn = uniform(&mut r, &[n, c, side, side], -1.0, 1.0);
        let mode = if trial % 5 == 0 { Mode::Eval } else { Mode::Train };
        let mut ctx = Ctx::new(Graph::new(), &store, mode);
        let v = ctx.graph.constant(vit.clone());
        let k = ctx.graph.constant(cnn.clone());
        let (rt, enc) = st.reconstruct_fuse(&mut ctx, v, k).unwrap();
        let batch_stats = mode == Mode::Train && n > 1;
        let (want_rt, want_enc) = fuse_oracle(&store, &st, &vit, &cnn, batch_stats);
        worst = worst.max(max_rel(ctx.graph.value(rt).data(), &want_rt, 1e-9));
        worst = worst.max(max_rel(ctx.graph.value(enc).data(), &want_enc, 1e-9));
    }
    worst
}
