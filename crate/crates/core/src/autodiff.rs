//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the
//! tape in reverse. Shape violations inside an op are programmer errors and
//! panic; the layer modules validate user-facing shapes before reaching here.
//!
//! Piecewise ops (ReLU, max pooling, probability clipping) can record which
//! branch each element took and a later graph can replay that pattern. This
//! lets finite-difference checks hold the active smooth piece fixed when a
//! perturbation would cross a kink.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

/// Statistics source for batch normalisation.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalise with the moments of the current batch.
    Batch,
    /// Normalise with fixed (running) moments.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
/// Norm below which a cosine term is treated as degenerate.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// One recorded branch decision set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Branch {
    Mask(Vec<bool>),
    Index(Vec<usize>),
}

/// The ordered sequence of branch decisions made during one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchLog(pub Vec<Branch>);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        moments: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu {
        x: Var,
        mask: Vec<bool>,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        x: Var,
        p: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    ChannelGate {
        x: Var,
        gates: Tensor,
    },
    ChannelMul {
        x: Var,
        s: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MapToTokens {
        x: Var,
    },
    TokensToMap {
        x: Var,
    },
    ChannelMean {
        x: Var,
    },
    DiceLoss {
        p: Var,
        gt: Tensor,
        smooth: f64,
    },
    BceLoss {
        p: Var,
        gt: Tensor,
        active: Vec<bool>,
    },
    CosineLoss {
        a: Var,
        b: Var,
        valid: Vec<bool>,
    },
    DotConst {
        x: Var,
        w: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    record: Option<BranchLog>,
    replay: Option<(BranchLog, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records every branch decision; see [`Graph::branch_log`].
    pub fn recording() -> Self {
        Self {
            record: Some(BranchLog::default()),
            ..Self::default()
        }
    }

    /// A graph that reuses the branch decisions of an earlier pass.
    pub fn replaying(log: BranchLog) -> Self {
        Self {
            replay: Some((log, 0)),
            ..Self::default()
        }
    }

    pub fn branch_log(&self) -> Option<&BranchLog> {
        self.record.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn decide(&mut self, computed: Branch) -> Branch {
        let chosen = match &mut self.replay {
            Some((log, cursor)) => {
                let b = log
                    .0
                    .get(*cursor)
                    .cloned()
                    .expect("branch replay log exhausted");
                *cursor += 1;
                assert_eq!(
                    std::mem::discriminant(&b),
                    std::mem::discriminant(&computed),
                    "branch replay kind mismatch"
                );
                b
            }
            None => computed,
        };
        if let Some(log) = &mut self.record {
            log.0.push(chosen.clone());
        }
        chosen
    }

    fn decide_mask(&mut self, computed: Vec<bool>) -> Vec<bool> {
        let n = computed.len();
        match self.decide(Branch::Mask(computed)) {
            Branch::Mask(m) => {
                assert_eq!(m.len(), n, "branch replay length mismatch");
                m
            }
            Branch::Index(_) => unreachable!(),
        }
    }

    fn decide_index(&mut self, computed: Vec<usize>) -> Vec<usize> {
        let n = computed.len();
        match self.decide(Branch::Index(computed)) {
            Branch::Index(m) => {
                assert_eq!(m.len(), n, "branch replay length mismatch");
                m
            }
            Branch::Mask(_) => unreachable!(),
        }
    }

    // ------------------------------------------------------------------
    // forward ops

    /// 2-D convolution. `w` is `[cout, cin, kh, kw]`, `b` is `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        assert_eq!(ws[1], cin, "conv input channels {cin} != weight {}", ws[1]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (k, p) = (geom.patch_len(), oh * ow);
        let mut out = vec![0.0; n * cout * p];
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; k * p]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let src: &[f64] = if geom.is_pointwise() {
                    xs
                } else {
                    kernels::im2col(xs, &geom, &mut col);
                    &col
                };
                let dst = &mut out[s * cout * p..(s + 1) * cout * p];
                kernels::gemm(cout, k, p, wv, false, src, false, 0.0, dst);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), cout);
                for s in 0..n {
                    for (c, &bias) in bv.iter().enumerate() {
                        let o = (s * cout + c) * p;
                        out[o..o + p].iter_mut().for_each(|y| *y += bias);
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
            },
            &parents,
        )
    }

    /// Batch normalisation over `(N, H, W)` for each channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), c);
        assert_eq!(bt.len(), c);
        let (mean, var) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..n {
                        let o = (smp * c + ch) * hw;
                        s += xv[o..o + hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut v = 0.0;
                    for smp in 0..n {
                        let o = (smp * c + ch) * hw;
                        v += xv[o..o + hw].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m;
                }
                (mean, var)
            }
            BnStats::Fixed { mean, var } => {
                assert_eq!(mean.len(), c);
                assert_eq!(var.len(), c);
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                let o = (smp * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let moments = matches!(stats, BnStats::Batch).then_some((mean, var));
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                moments,
            },
            &[x, gamma, beta],
        )
    }

    /// Batch mean and biased variance used by a batch-statistics norm node.
    pub fn bn_moments(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                moments: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let computed: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        let mask = self.decide_mask(computed);
        let xv = self.value(x);
        let out: Vec<f64> = xv
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Relu { x, mask }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut computed = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    computed.push(best);
                }
            }
        }
        let argmax = self.decide_index(computed);
        let xv = self.value(x).data();
        let out: Vec<f64> = argmax.iter().map(|&i| xv[i]).collect();
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            &[x],
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(k > 0 && h % k == 0 && w % k == 0, "avg_pool({k}) on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / k) * ow + xx / k] += xv[plane * h * w + y * w + xx] * scale;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::AvgPool { x, k },
            &[x],
        )
    }

    /// Spatial upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Var {
        assert!(factor > 0);
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            match mode {
                UpsampleMode::Nearest => {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for y in 0..oh {
                        let (y0, y1, fy) = kernels::bilinear_taps(y, factor, h);
                        for xx in 0..ow {
                            let (x0, x1, fx) = kernels::bilinear_taps(xx, factor, w);
                            dst[y * ow + xx] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                                + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::Upsample { x, factor, mode },
            &[x],
        )
    }

    /// Concatenate 4-D maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat: mismatched dims");
            ctot += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        self.push(
            Tensor::from_vec(&[n, ctot, h, w], out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::Add { a, b }, &[a, b])
    }

    /// `x[n, ...] + p[...]` for every leading index `n`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Var {
        let xv = self.value(x);
        let pv = self.value(p);
        let per = pv.numel();
        assert_eq!(&xv.shape()[1..], pv.shape(), "add_broadcast: shape mismatch");
        let out: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + pv.data()[i % per])
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_vec(&shape, out), Op::AddBroadcast { x, p }, &[x, p])
    }

    /// `sum_i c_i * x_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut out = vec![0.0; self.value(terms[0].0).numel()];
        for &(v, c) in terms {
            let tv = self.value(v);
            assert_eq!(tv.shape(), &shape[..], "weighted_sum: shape mismatch");
            for (o, x) in out.iter_mut().zip(tv.data()) {
                *o += c * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &parents,
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.weighted_sum(&[(x, c)])
    }

    /// Multiply channel `c` of sample `n` by the constant `gates[n, c]`.
    pub fn channel_gate(&mut self, x: Var, gates: Tensor) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(gates.shape(), &[n, c], "channel_gate: gates must be [N, C]");
        let out = scale_channels(self.value(x).data(), gates.data(), h * w);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::ChannelGate { x, gates },
            &[x],
        )
    }

    /// Multiply channel `c` of sample `n` by the variable `s[n, c]`.
    pub fn channel_mul(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), &[n, c], "channel_mul: scale must be [N, C]");
        let out = scale_channels(self.value(x).data(), self.value(s).data(), h * w);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::ChannelMul { x, s },
            &[x, s],
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|pl| xv[pl * hw..(pl + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool { x }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]` spatial max; ties go to the first in scan order.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let computed: Vec<usize> = (0..n * c)
            .map(|pl| {
                let base = pl * hw;
                let mut best = base;
                for i in base + 1..base + hw {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let argmax = self.decide_index(computed);
        let xv = self.value(x).data();
        let out: Vec<f64> = argmax.iter().map(|&i| xv[i]).collect();
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::GlobalMaxPool { x, argmax },
            &[x],
        )
    }

    /// Affine map over the last axis; `w` is `[fout, fin]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let fin = *xs.last().expect("linear on 0-D tensor");
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1], fin, "linear: input width {fin} != weight {}", ws[1]);
        let fout = ws[0];
        let rows = self.value(x).numel() / fin;
        let mut out = vec![0.0; rows * fout];
        kernels::gemm(
            rows,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), fout);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(y, b)| *y += b);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
            &parents,
        )
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), d);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product self-attention over `[N, T, D]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let shape = self.value(q).shape().to_vec();
        assert_eq!(shape.len(), 3, "attention expects [N, T, D]");
        assert_eq!(self.value(k).shape(), &shape[..]);
        assert_eq!(self.value(v).shape(), &shape[..]);
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        assert!(heads > 0 && d % heads == 0, "embed dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; n * t * d];
        for s in 0..n {
            let base = s * t * d;
            for hd in 0..heads {
                let off = hd * dh;
                let pr = &mut probs[(s * heads + hd) * t * t..(s * heads + hd + 1) * t * t];
                for i in 0..t {
                    let row = &mut pr[i * t..(i + 1) * t];
                    let qi = &qv[base + i * d + off..base + i * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[base + j * d + off..base + j * d + off + dh];
                        *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    let oi = &mut out[base + i * d + off..base + i * d + off + dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vv[base + j * d + off..base + j * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Softmax weights `[N, heads, T, T]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn map_to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let t = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * t * c];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..t {
                    out[(s * t + p) * c + ch] = xv[(s * c + ch) * t + p];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, t, c], out), Op::MapToTokens { x }, &[x])
    }

    /// `[N, h*w, D] -> [N, D, h, w]`.
    pub fn tokens_to_map(&mut self, x: Var, h: usize, w: usize) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3);
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(t, h * w, "tokens_to_map: {t} tokens != {h}x{w}");
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * t * d];
        for s in 0..n {
            for p in 0..t {
                for ch in 0..d {
                    out[(s * d + ch) * t + p] = xv[(s * t + p) * d + ch];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, d, h, w], out), Op::TokensToMap { x }, &[x])
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            for ch in 0..c {
                let src = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, v) in out[s * hw..(s + 1) * hw].iter_mut().zip(src) {
                    *o += v / c as f64;
                }
            }
        }
        self.push(Tensor::from_vec(&[n, 1, h, w], out), Op::ChannelMean { x }, &[x])
    }

    /// `1 - (2 sum(p g) + s) / (sum p + sum g + s)` over the whole batch.
    pub fn dice_loss(&mut self, p: Var, gt: Tensor, smooth: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), gt.shape(), "dice_loss: shape mismatch");
        let (inter, sp, sg) = dice_sums(pv.data(), gt.data());
        let loss = 1.0 - (2.0 * inter + smooth) / (sp + sg + smooth);
        self.push(Tensor::scalar(loss), Op::DiceLoss { p, gt, smooth }, &[p])
    }

    /// Mean binary cross-entropy with probabilities clipped to `[eps, 1 - eps]`.
    pub fn bce_loss(&mut self, p: Var, gt: Tensor, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), gt.shape(), "bce_loss: shape mismatch");
        let computed: Vec<bool> = pv.data().iter().map(|&x| x > eps && x < 1.0 - eps).collect();
        let active = self.decide_mask(computed);
        let pv = self.value(p).data();
        let m = pv.len() as f64;
        let mut loss = 0.0;
        for ((&x, &g), &on) in pv.iter().zip(gt.data()).zip(&active) {
            let pc = if on { x } else { x.clamp(eps, 1.0 - eps) };
            loss -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        }
        self.push(
            Tensor::scalar(loss / m),
            Op::BceLoss { p, gt, active },
            &[p],
        )
    }

    /// Mean over samples of `1 - cos(a_n, b_n)`. A sample whose vectors have
    /// (near) zero norm contributes exactly 1 and no gradient.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "cosine_loss: shape mismatch");
        let n = av.shape()[0];
        let per = av.numel() / n;
        let mut valid = Vec::with_capacity(n);
        let mut total = 0.0;
        for s in 0..n {
            let (x, y) = (
                &av.data()[s * per..(s + 1) * per],
                &bv.data()[s * per..(s + 1) * per],
            );
            let (dot, na, nb) = dot_norms(x, y);
            if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                valid.push(false);
                total += 1.0;
            } else {
                valid.push(true);
                total += 1.0 - dot / (na * nb);
            }
        }
        self.push(
            Tensor::scalar(total / n as f64),
            Op::CosineLoss { a, b, valid },
            &[a, b],
        )
    }

    /// Number of samples that hit the zero-norm guard in a cosine node.
    pub fn cosine_degenerate(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::CosineLoss { valid, .. } => valid.iter().filter(|ok| !**ok).count(),
            _ => 0,
        }
    }

    /// `sum(x * w)` for a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, w: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), w.shape(), "dot_const: shape mismatch");
        let s: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::DotConst { x, w }, &[x])
    }

    // ------------------------------------------------------------------
    // backward

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dy = gy.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
            } => {
                let n = self.value(x).shape()[0];
                let (k, p) = (geom.patch_len(), geom.out_h() * geom.out_w());
                let in_len = geom.cin * geom.h * geom.w;
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dw = self.needs(w).then(|| vec![0.0; wv.len()]);
                let mut dx = self.needs(x).then(|| vec![0.0; xv.len()]);
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { k * p }];
                let mut dcol = vec![0.0; k * p];
                for s in 0..n {
                    let dys = &dy[s * cout * p..(s + 1) * cout * p];
                    let xs = &xv[s * in_len..(s + 1) * in_len];
                    if let Some(dw) = dw.as_mut() {
                        let src: &[f64] = if geom.is_pointwise() {
                            xs
                        } else {
                            kernels::im2col(xs, &geom, &mut col);
                            &col
                        };
                        kernels::gemm(cout, p, k, dys, false, src, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.is_pointwise() {
                            kernels::gemm(k, cout, p, wv, true, dys, false, 0.0, dxs);
                        } else {
                            kernels::gemm(k, cout, p, wv, true, dys, false, 0.0, &mut dcol);
                            kernels::col2im(&dcol, &geom, dxs);
                        }
                    }
                }
                if let Some(dw) = dw {
                    let shape = self.value(w).shape().to_vec();
                    self.accumulate(grads, w, Tensor::from_vec(&shape, dw));
                }
                if let Some(dx) = dx {
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::from_vec(&shape, dx));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let o = (s * cout + c) * p;
                            *acc += dy[o..o + p].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[cout], db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                moments,
            } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let o = (s * c + ch) * hw;
                        for j in o..o + hw {
                            dg[ch] += dy[j] * xhat[j];
                            db[ch] += dy[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * hw;
                            for j in o..o + hw {
                                dx[j] = if moments.is_some() {
                                    g[ch] * inv_std[ch] / m * (m * dy[j] - db[ch] - xhat[j] * dg[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dg));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec(&[c], db));
                }
            }
            Op::Relu { x, mask } => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(mask)
                    .map(|(&d, &on)| if on { d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| d * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[i].value.data();
                let dx: Vec<f64> = dy.iter().zip(yv).map(|(d, y)| d * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(dy) {
                    d[src] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::AvgPool { x, k } => {
                let (n, c, h, w) = self.value(x).dims4();
                let (oh, ow) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[plane * h * w + y * w + xx] = dy[plane * oh * ow + (y / k) * ow + xx / k] * scale;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            &Op::Upsample { x, factor, mode } => {
                let (n, c, h, w) = self.value(x).dims4();
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    match mode {
                        UpsampleMode::Nearest => {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                                }
                            }
                        }
                        UpsampleMode::Bilinear => {
                            for y in 0..oh {
                                let (y0, y1, fy) = kernels::bilinear_taps(y, factor, h);
                                for xx in 0..ow {
                                    let (x0, x1, fx) = kernels::bilinear_taps(xx, factor, w);
                                    let g = src[y * ow + xx];
                                    dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * g;
                                    dst[y0 * w + x1] += (1.0 - fy) * fx * g;
                                    dst[y1 * w + x0] += fy * (1.0 - fx) * g;
                                    dst[y1 * w + x1] += fy * fx * g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Concat { parts } => {
                let (n, ctot, h, w) = gy.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let o = (s * ctot + offset) * hw;
                            dp.extend_from_slice(&dy[o..o + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], dp));
                    }
                    offset += pc;
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(grads, a, gy.clone());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, gy.clone());
                }
            }
            &Op::AddBroadcast { x, p } => {
                if self.needs(x) {
                    self.accumulate(grads, x, gy.clone());
                }
                if self.needs(p) {
                    let mut dp = Tensor::zeros(self.value(p).shape());
                    let per = dp.numel();
                    for (j, g) in dy.iter().enumerate() {
                        dp.data_mut()[j % per] += g;
                    }
                    self.accumulate(grads, p, dp);
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        self.accumulate(grads, v, gy.map(|g| g * c));
                    }
                }
            }
            Op::ChannelGate { x, gates } => {
                let hw = gy.numel() / gates.numel();
                let dx = scale_channels(dy, gates.data(), hw);
                self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
            }
            &Op::ChannelMul { x, s } => {
                let sv = self.value(s).data();
                let hw = gy.numel() / sv.len();
                if self.needs(x) {
                    let dx = scale_channels(dy, sv, hw);
                    self.accumulate(grads, x, Tensor::from_vec(gy.shape(), dx));
                }
                if self.needs(s) {
                    let xv = self.value(x).data();
                    let ds: Vec<f64> = (0..sv.len())
                        .map(|pl| {
                            let r = pl * hw..(pl + 1) * hw;
                            dy[r.clone()].iter().zip(&xv[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    let shape = self.value(s).shape().to_vec();
                    self.accumulate(grads, s, Tensor::from_vec(&shape, ds));
                }
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for (pl, g) in dy.iter().enumerate() {
                    dx[pl * hw..(pl + 1) * hw].fill(g / hw as f64);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            } => {
                if self.needs(x) {
                    let mut dx = vec![0.0; rows * fin];
                    kernels::gemm(rows, fout, fin, dy, false, self.value(w).data(), false, 0.0, &mut dx);
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::from_vec(&shape, dx));
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, rows, fin, dy, true, self.value(x).data(), false, 0.0, &mut dw);
                    self.accumulate(grads, w, Tensor::from_vec(&[fout, fin], dw));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![0.0; fout];
                    for row in dy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[fout], db));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data();
                let d = g.len();
                let rows = dy.len() / d;
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut dx = vec![0.0; dy.len()];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let idx = r * d + j;
                        dg[j] += dy[idx] * xhat[idx];
                        db[j] += dy[idx];
                        let dxh = dy[idx] * g[j];
                        s1 += dxh;
                        s2 += dxh * xhat[idx];
                    }
                    for j in 0..d {
                        let idx = r * d + j;
                        let dxh = dy[idx] * g[j];
                        dx[idx] = inv_std[r] / d as f64 * (d as f64 * dxh - s1 - xhat[idx] * s2);
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::from_vec(gy.shape(), dx));
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[d], dg));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, Tensor::from_vec(&[d], db));
                }
            }
            &Op::Attention {
                q,
                k,
                v,
                heads,
                ref probs,
            } => {
                let shape = gy.shape();
                let (n, t, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                );
                let mut dq = vec![0.0; n * t * d];
                let mut dk = vec![0.0; n * t * d];
                let mut dv = vec![0.0; n * t * d];
                let mut dp = vec![0.0; t];
                for s in 0..n {
                    let base = s * t * d;
                    for hd in 0..heads {
                        let off = hd * dh;
                        let pr = &probs[(s * heads + hd) * t * t..(s * heads + hd + 1) * t * t];
                        for i in 0..t {
                            let row = &pr[i * t..(i + 1) * t];
                            let doi = &dy[base + i * d + off..base + i * d + off + dh];
                            let mut dot = 0.0;
                            for j in 0..t {
                                let vj = &vv[base + j * d + off..base + j * d + off + dh];
                                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += dp[j] * row[j];
                                let dvj = &mut dv[base + j * d + off..base + j * d + off + dh];
                                for (acc, g) in dvj.iter_mut().zip(doi) {
                                    *acc += row[j] * g;
                                }
                            }
                            for j in 0..t {
                                let ds = row[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for e in 0..dh {
                                    dq[base + i * d + off + e] += ds * kv[base + j * d + off + e];
                                    dk[base + j * d + off + e] += ds * qv[base + i * d + off + e];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(q, dq), (k, dk), (v, dv)] {
                    if self.needs(var) {
                        self.accumulate(grads, var, Tensor::from_vec(shape, g));
                    }
                }
            }
            Op::MapToTokens { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let t = h * w;
                let mut dx = vec![0.0; n * c * t];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..t {
                            dx[(s * c + ch) * t + p] = dy[(s * t + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::TokensToMap { x } => {
                let (n, d, h, w) = gy.dims4();
                let t = h * w;
                let mut dx = vec![0.0; n * t * d];
                for s in 0..n {
                    for ch in 0..d {
                        for p in 0..t {
                            dx[(s * t + p) * d + ch] = dy[(s * d + ch) * t + p];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, t, d], dx));
            }
            Op::ChannelMean { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for s in 0..n {
                    for ch in 0..c {
                        let dst = &mut dx[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        for (o, g) in dst.iter_mut().zip(&dy[s * hw..(s + 1) * hw]) {
                            *o = g / c as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::DiceLoss { p, gt, smooth } => {
                let pv = self.value(*p).data();
                let (inter, sp, sg) = dice_sums(pv, gt.data());
                let den = sp + sg + smooth;
                let num = 2.0 * inter + smooth;
                let dx: Vec<f64> = gt
                    .data()
                    .iter()
                    .map(|&g| -dy[0] * (2.0 * g * den - num) / (den * den))
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(gt.shape(), dx));
            }
            Op::BceLoss { p, gt, active } => {
                let pv = self.value(*p).data();
                let m = pv.len() as f64;
                let dx: Vec<f64> = pv
                    .iter()
                    .zip(gt.data())
                    .zip(active)
                    .map(|((&x, &g), &on)| {
                        if on {
                            -dy[0] * (g / x - (1.0 - g) / (1.0 - x)) / m
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::from_vec(gt.shape(), dx));
            }
            &Op::CosineLoss { a, b, ref valid } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let n = valid.len();
                let per = av.len() / n;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; av.len()];
                for s in 0..n {
                    if !valid[s] {
                        continue;
                    }
                    let r = s * per..(s + 1) * per;
                    let (x, y) = (&av[r.clone()], &bv[r.clone()]);
                    let (dot, na, nb) = dot_norms(x, y);
                    let cos = dot / (na * nb);
                    let c = -dy[0] / n as f64;
                    for j in 0..per {
                        da[s * per + j] = c * (y[j] / (na * nb) - cos * x[j] / (na * na));
                        db[s * per + j] = c * (x[j] / (na * nb) - cos * y[j] / (nb * nb));
                    }
                }
                if self.needs(a) {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(grads, a, Tensor::from_vec(&shape, da));
                }
                if self.needs(b) {
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(grads, b, Tensor::from_vec(&shape, db));
                }
            }
            Op::DotConst { x, w } => {
                self.accumulate(grads, *x, w.map(|v| v * dy[0]));
            }
        }
    }
}

fn scale_channels(x: &[f64], scales: &[f64], hw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (pl, &s) in scales.iter().enumerate() {
        out.extend(x[pl * hw..(pl + 1) * hw].iter().map(|v| v * s));
    }
    out
}

fn dice_sums(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    p.iter()
        .zip(g)
        .fold((0.0, 0.0, 0.0), |(i, sp, sg), (&p, &g)| (i + p * g, sp + p, sg + g))
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (dot, xx, yy) = x
        .iter()
        .zip(y)
        .fold((0.0, 0.0, 0.0), |(d, a, b), (&u, &v)| (d + u * v, a + u * u, b + v * v));
    (dot, xx.sqrt(), yy.sqrt())
}
