//! The full finite-difference suite: every differentiable op, the prompted
//! window attention end to end, patch merging, both decoders, the heads, the
//! losses and a small model end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheckOptions, GradCheckReport, Precision, ScalarFn};
use crate::error::Result;
use crate::losses::{multitask_loss, BatchTargets, LossWeights};
use crate::model::backbone::{
    average_window_prompts, duplicate_prompts, patch_merging, window_attention_with_prompts, AttnParams,
};
use crate::model::decoding::{channel_decode, fuse_task_features, spatial_decode, StageDecode};
use crate::model::heads::{forward_heads, DetVars, HeadOutputs};
use crate::model::params::{param_specs, Bound, ParamStore};
use crate::model::windows::{batched, raster_order, window_order};
use crate::model::{forward, stack_images, BackboneConfig, Mode, ModelConfig};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::scene::{generate_all, GenSpec};

macro_rules! scalar_fn {
    ($name:ident, |$g:ident, $v:ident| $body:expr) => {
        struct $name;
        impl ScalarFn for $name {
            fn build<T: Real>(&self, $g: &mut Graph<T>, $v: &[Var]) -> Result<Var> {
                $body
            }
        }
    };
}

/// Fixed pseudo-random projection to a scalar so every output coordinate
/// carries a distinct weight.
fn project<T: Real>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0) - 0.45).collect();
    let shape = g.shape(y).to_vec();
    let wv = g.constant(Tensor::from_f64(&shape, &w)?);
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

scalar_fn!(MatMulFn, |g, v| {
    let c = g.matmul(v[0], v[1])?;
    project(g, c)
});
scalar_fn!(MatMulNtBatchedFn, |g, v| {
    let c = g.matmul_nt(v[0], v[1])?;
    project(g, c)
});
scalar_fn!(BroadcastFn, |g, v| {
    let a = g.add(v[0], v[1])?;
    let m = g.mul(a, v[2])?;
    let s = g.sub(m, v[1])?;
    let d = g.div(s, v[3])?;
    project(g, d)
});
scalar_fn!(UnaryFn, |g, v| {
    let a = g.gelu(v[0]);
    let b = g.sigmoid(a);
    let c = g.exp(b);
    let d = g.log(c);
    let e = g.smooth_l1(v[0], 0.7);
    let f = g.abs(v[0]);
    let r = g.relu(v[0]);
    let f = g.add(f, r)?;
    let s = g.add(d, e)?;
    let s = g.add(s, f)?;
    let s = g.scale(s, 1.3);
    project(g, s)
});
scalar_fn!(SoftmaxFn, |g, v| {
    let s = g.softmax(v[0]);
    project(g, s)
});
scalar_fn!(LayerNormFn, |g, v| {
    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
    project(g, y)
});
scalar_fn!(BatchNormFn, |g, v| {
    let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
    project(g, y)
});
scalar_fn!(BatchNormEvalFn, |g, v| {
    let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
    project(g, y)
});
scalar_fn!(ConvFn, |g, v| {
    let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
    project(g, y)
});
scalar_fn!(UpsampleFn, |g, v| {
    let y = g.upsample_bilinear(v[0], 7, 12)?;
    project(g, y)
});
scalar_fn!(LayoutFn, |g, v| {
    let p = g.permute(v[0], &[2, 0, 1])?;
    let r = g.reshape(p, &[4, 6])?;
    let i = g.index_select(r, 0, &[3, 0, 0, 2])?;
    let n = g.narrow(i, 1, 1, 4)?;
    let c = g.concat(&[n, n], 1)?;
    let s = g.sum_axis(c, 1, true)?;
    let m = g.mean_axis(c, 0, false)?;
    let a = project(g, s)?;
    let b = project(g, m)?;
    g.add(a, b)
});
scalar_fn!(LossOpsFn, |g, v| {
    let ce = g.softmax_cross_entropy(v[0], &[Some(1), None, Some(3)])?;
    let bce = g.bce_with_logits(v[1], &[0.2, 0.9, 0.0, 1.0])?;
    let fl = g.sigmoid_focal(v[1], &[0.0, 1.0, 0.0, 1.0], 0.25, 2.0)?;
    let a = project(g, ce)?;
    let b = project(g, bce)?;
    let c = project(g, fl)?;
    let s = g.add(a, b)?;
    g.add(s, c)
});

fn sum_projected<T: Real>(g: &mut Graph<T>, outs: &[Var]) -> Result<Var> {
    let mut acc = project(g, outs[0])?;
    for &o in &outs[1..] {
        let p = project(g, o)?;
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Raster tokens into windows, prompts duplicated per window, attention,
/// tokens back to raster order and prompts averaged over windows.
struct AttentionFn {
    batch: usize,
    grid: (usize, usize),
    window: usize,
    heads: usize,
}

impl ScalarFn for AttentionFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let ((hs, ws), w, b) = (self.grid, self.window, self.batch);
        let (n, c) = (hs * ws, g.shape(v[0])[1]);
        let nw = n / (w * w);
        let win = g.index_select(v[0], 0, &batched(&window_order(hs, ws, w), b))?;
        let win = g.reshape(win, &[b * nw, w * w, c])?;
        let dup = duplicate_prompts(g, v[1], nw)?;
        let p = AttnParams {
            qkv_w: v[2],
            qkv_b: v[3],
            proj_w: v[4],
            proj_b: v[5],
        };
        let att = window_attention_with_prompts(g, win, dup, &p, self.heads)?;
        let back = g.reshape(att.tokens, &[b * n, c])?;
        let back = g.index_select(back, 0, &batched(&raster_order(hs, ws, w), b))?;
        let avg = average_window_prompts(g, att.prompts, nw)?;
        sum_projected(g, &[back, avg, att.affinity, att.values])
    }
}

struct MergeFn {
    batch: usize,
    grid: (usize, usize),
}

impl ScalarFn for MergeFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let maps = [(v[4], v[5]), (v[6], v[7]), (v[8], v[9])];
        let (tok, prm) = patch_merging(g, v[0], self.batch, self.grid, (v[1], v[2]), v[3], &maps)?;
        sum_projected(g, &[tok, prm])
    }
}

scalar_fn!(SpatialDecodeFn, |g, v| {
    let y = spatial_decode(g, v[0], v[1], 4, (v[2], v[3]))?;
    project(g, y)
});
scalar_fn!(ChannelDecodeFn, |g, v| {
    let y = channel_decode(g, v[0], v[1])?;
    project(g, y)
});
scalar_fn!(FuseFn, |g, v| {
    let stages = [
        StageDecode {
            spatial: v[0],
            channel: v[1],
            grid: (4, 8),
        },
        StageDecode {
            spatial: v[2],
            channel: v[3],
            grid: (2, 4),
        },
    ];
    let y = fuse_task_features(g, &stages, &[(v[4], v[5]), (v[6], v[7])], (4, 8))?;
    project(g, y)
});

/// Inputs: the three task features, then every head parameter in `names` order.
struct HeadsFn {
    cfg: ModelConfig,
    params: ParamStore,
    names: Vec<String>,
    mode: Mode,
}

impl ScalarFn for HeadsFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let bound = Bound::from_vars(self.names.iter().cloned().zip(v[3..].iter().copied()));
        let mut stats = Vec::new();
        let h = forward_heads(g, &self.cfg, &self.params, &bound, &v[..3], self.mode, &mut stats)?;
        let d = h.det;
        sum_projected(
            g,
            &[
                h.semseg,
                h.depth_log,
                d.cls,
                d.ctr,
                d.offset,
                d.depth,
                d.dims,
                d.rot,
                d.dir,
            ],
        )
    }
}

/// Inputs: semseg logits, log-depth, then the seven detection maps.
struct LossFn {
    targets: BatchTargets,
    weights: LossWeights,
}

impl ScalarFn for LossFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let heads = HeadOutputs {
            semseg: v[0],
            depth_log: v[1],
            det: DetVars {
                cls: v[2],
                ctr: v[3],
                offset: v[4],
                depth: v[5],
                dims: v[6],
                rot: v[7],
                dir: v[8],
            },
        };
        Ok(multitask_loss(g, &heads, &self.targets, &self.weights)?.0.total)
    }
}

/// Backbone and decoding end to end, projected from the fused task features;
/// the listed parameters are inputs, the rest constants.
struct ModelFn {
    cfg: ModelConfig,
    params: ParamStore,
    names: Vec<String>,
    images: Vec<Tensor<f32>>,
}

impl ScalarFn for ModelFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let mut vars = Vec::with_capacity(self.params.params.len());
        for (name, t) in &self.params.params {
            let var = match self.names.iter().position(|n| n == name) {
                Some(i) => v[i],
                None => g.constant(t.cast()),
            };
            vars.push((name.clone(), var));
        }
        let bound = Bound::from_vars(vars);
        let x = g.constant(stack_images(&self.images.iter().collect::<Vec<_>>())?);
        let out = forward(g, &self.cfg, &self.params, &bound, x, Mode::Eval)?;
        sum_projected(g, &out.features)
    }
}

fn jitter(base: &Tensor<f32>, noise: &Tensor<f64>) -> Tensor<f64> {
    let v = base
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, y)| x as f64 + y)
        .collect();
    Tensor::new(base.shape(), v).expect("same shape")
}

fn random_inputs(seed: u64, shapes: &[&[usize]], scale: f64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::new(s, v).expect("shape matches data")
        })
        .collect()
}

/// Model configuration of the model-level cases: 16×32 images, 4×8 features.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_size: [16, 32],
            patch_size: 4,
            stage_depths: vec![1, 1],
            stage_heads: vec![1, 2],
            base_channels: 8,
            window_size: 2,
            mlp_ratio: 2,
        },
        decoder_channels: 4,
        ..ModelConfig::default()
    }
}

fn tiny_scenes(cfg: &ModelConfig) -> Result<(Vec<Tensor<f32>>, BatchTargets)> {
    let [h, w] = cfg.backbone.image_size;
    let scenes = generate_all(&GenSpec {
        seed: 21,
        num_scenes: 2,
        height: h,
        width: w,
        ..GenSpec::default()
    })?;
    let refs: Vec<_> = scenes.iter().collect();
    let targets = BatchTargets::from_samples(&refs, cfg.feature_grid(), cfg.stride(), cfg.num_det_classes)?;
    Ok((scenes.into_iter().map(|s| s.image).collect(), targets))
}

/// Names of the cases, in execution order.
pub const CASES: [&str; 22] = [
    "matmul",
    "matmul_nt_batched",
    "broadcast",
    "unary",
    "softmax",
    "layer_norm",
    "batch_norm",
    "batch_norm_eval",
    "conv2d",
    "upsample",
    "layout",
    "loss_ops",
    "window_attention",
    "patch_merging",
    "spatial_decode",
    "channel_decode",
    "fusion",
    "heads_train",
    "heads_eval",
    "losses",
    "model",
    "model_perturbed",
];

/// Runs every case at `precision`.
pub fn run_suite(precision: Precision, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::with_capacity(CASES.len());
    let mut run = |name: &str, f: &dyn Fn() -> Result<GradCheckReport>| -> Result<()> {
        let r = f()?;
        log::info!("gradcheck {name} {:?}: rel err {:.3e}", precision, r.max_rel_err);
        out.push(r);
        Ok(())
    };
    let c = |name: &str, f: &dyn DynCheck, seed: u64, shapes: &[&[usize]], scale: f64| {
        f.check(name, &random_inputs(seed, shapes, scale), precision, opts)
    };

    run("matmul", &|| c("matmul", &MatMulFn, 1, &[&[3, 4], &[4, 5]], 1.0))?;
    run("matmul_nt_batched", &|| {
        c(
            "matmul_nt_batched",
            &MatMulNtBatchedFn,
            2,
            &[&[2, 3, 4], &[2, 5, 4]],
            1.0,
        )
    })?;
    run("broadcast", &|| {
        c(
            "broadcast",
            &BroadcastFn,
            3,
            &[&[2, 3, 4], &[4], &[2, 1, 4], &[3, 1]],
            1.0,
        )
    })?;
    run("unary", &|| c("unary", &UnaryFn, 4, &[&[3, 5]], 1.0))?;
    run("softmax", &|| c("softmax", &SoftmaxFn, 5, &[&[4, 6]], 1.0))?;
    run("layer_norm", &|| {
        c("layer_norm", &LayerNormFn, 6, &[&[5, 8], &[8], &[8]], 1.0)
    })?;
    run("batch_norm", &|| {
        c("batch_norm", &BatchNormFn, 7, &[&[2, 2, 3, 3], &[2], &[2]], 1.0)
    })?;
    run("batch_norm_eval", &|| {
        c(
            "batch_norm_eval",
            &BatchNormEvalFn,
            8,
            &[&[2, 2, 3, 3], &[2], &[2]],
            1.0,
        )
    })?;
    run("conv2d", &|| {
        c("conv2d", &ConvFn, 9, &[&[2, 3, 5, 7], &[4, 3, 3, 3], &[4]], 1.0)
    })?;
    run("upsample", &|| c("upsample", &UpsampleFn, 10, &[&[2, 3, 4, 5]], 1.0))?;
    run("layout", &|| c("layout", &LayoutFn, 11, &[&[2, 3, 4]], 1.0))?;
    run("loss_ops", &|| c("loss_ops", &LossOpsFn, 12, &[&[3, 4], &[4]], 1.0))?;

    let att = AttentionFn {
        batch: 2,
        grid: (4, 4),
        window: 2,
        heads: 2,
    };
    run("window_attention", &|| {
        c(
            "window_attention",
            &att,
            13,
            &[&[32, 8], &[2, 3, 8], &[8, 24], &[24], &[8, 8], &[8]],
            0.7,
        )
    })?;
    let merge = MergeFn { batch: 2, grid: (4, 4) };
    let mshapes: [&[usize]; 10] = [
        &[32, 4],
        &[16, 8],
        &[8],
        &[2, 3, 4],
        &[4, 8],
        &[8],
        &[4, 8],
        &[8],
        &[4, 8],
        &[8],
    ];
    run("patch_merging", &|| c("patch_merging", &merge, 14, &mshapes, 1.0))?;
    run("spatial_decode", &|| {
        c(
            "spatial_decode",
            &SpatialDecodeFn,
            15,
            &[&[2, 2, 16], &[2, 16, 8], &[8, 8], &[8]],
            1.0,
        )
    })?;
    run("channel_decode", &|| {
        c("channel_decode", &ChannelDecodeFn, 16, &[&[2, 16, 8], &[8]], 1.0)
    })?;
    let fshapes: [&[usize]; 8] = [
        &[2, 32, 6],
        &[2, 32, 6],
        &[2, 8, 6],
        &[2, 8, 6],
        &[6, 5],
        &[5],
        &[6, 5],
        &[5],
    ];
    run("fusion", &|| c("fusion", &FuseFn, 17, &fshapes, 1.0))?;

    let cfg = tiny_model();
    let params = ParamStore::init(&cfg, 3)?;
    let (h1, w1) = cfg.feature_grid();
    let d = cfg.decoder_channels;
    let head_specs: Vec<_> = param_specs(&cfg)
        .into_iter()
        .filter(|s| s.name.starts_with("head."))
        .collect();
    for (name, mode, seed) in [("heads_train", Mode::Train, 18), ("heads_eval", Mode::Eval, 19)] {
        let f = HeadsFn {
            cfg: cfg.clone(),
            params: params.clone(),
            names: head_specs.iter().map(|s| s.name.clone()).collect(),
            mode,
        };
        // ReLU kinks make a uniformly random point a poor probe (a near-zero
        // BN scale piles many pre-activations onto the kink), so the
        // parameters stay close to their initial values
        let feat = [2, d, h1, w1];
        let mut inputs = random_inputs(seed, &[&feat, &feat, &feat], 1.0);
        for (i, s) in head_specs.iter().enumerate() {
            let noise = random_inputs(seed + 100 + i as u64, &[&s.shape], 0.05).remove(0);
            inputs.push(jitter(params.param(&s.name)?, &noise));
        }
        run(name, &|| f.check(name, &inputs, precision, opts))?;
    }

    let (images, targets) = tiny_scenes(&cfg)?;
    let lf = LossFn {
        targets,
        weights: LossWeights::default(),
    };
    let (k, kd) = (cfg.num_semseg_classes, cfg.num_det_classes);
    let lshapes: Vec<Vec<usize>> = [k, 1, kd, 1, 2, 1, 3, 3, 2]
        .iter()
        .map(|&ch| vec![2, ch, h1, w1])
        .collect();
    let lrefs: Vec<&[usize]> = lshapes.iter().map(Vec::as_slice).collect();
    run("losses", &|| c("losses", &lf, 20, &lrefs, 1.0))?;

    let names: Vec<String> = [
        "embed.w",
        "prompt.semseg.spatial",
        "prompt.depth.channel.s1",
        "stage0.block0.qkv.w",
        "stage1.block0.fc1.w",
        "merge0.w",
        "merge0.prompt.det.w",
        "decode.det.s1.spatial.w",
        "decode.depth.s0.fuse.w",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mf = ModelFn {
        cfg: cfg.clone(),
        params: params.clone(),
        names: names.clone(),
        images,
    };
    let model_inputs = names
        .iter()
        .map(|n| Ok(params.param(n)?.cast::<f64>()))
        .collect::<Result<Vec<_>>>()?;
    run("model", &|| mf.check("model", &model_inputs, precision, opts))?;
    // away from the initial point, where zero-initialized biases sit
    let shifted: Vec<Tensor<f64>> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let p = params.param(n)?;
            Ok(jitter(p, &random_inputs(22 + i as u64, &[p.shape()], 0.05).remove(0)))
        })
        .collect::<Result<_>>()?;
    run("model_perturbed", &|| {
        mf.check("model_perturbed", &shifted, precision, opts)
    })?;
    Ok(out)
}

/// Object-safe wrapper so the cases can share one closure.
trait DynCheck {
    fn check(
        &self,
        name: &str,
        inputs: &[Tensor<f64>],
        p: Precision,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport>;
}

impl<F: ScalarFn> DynCheck for F {
    fn check(
        &self,
        name: &str,
        inputs: &[Tensor<f64>],
        p: Precision,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        check(name, self, inputs, p, opts)
    }
}
