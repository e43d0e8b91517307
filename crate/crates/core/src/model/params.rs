//! Named parameters and batch-norm buffers of the whole model.

use std::ops::Index;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::numerics::{BnBatchStats, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(spec(format!("{prefix}.w"), &[fan_in, fan_out], Init::Normal(0.02)));
    out.push(spec(format!("{prefix}.b"), &[fan_out], Init::Zeros));
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(spec(format!("{prefix}.g"), &[c], Init::Ones));
    out.push(spec(format!("{prefix}.b"), &[c], Init::Zeros));
}

/// Output channels of the detection branches, in head order.
pub fn det_branches(num_classes: usize) -> [(&'static str, usize); 7] {
    [
        ("cls", num_classes),
        ("ctr", 1),
        ("offset", 2),
        ("depth", 1),
        ("dims", 3),
        ("rot", 3),
        ("dir", 2),
    ]
}

/// Every trainable parameter, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let bb = &cfg.backbone;
    let (c0, p) = (bb.base_channels, bb.patch_size);
    let (h0, w0) = bb.stage_grid(0);
    let mut out = Vec::new();
    linear(&mut out, "embed", 3 * p * p, c0);
    out.push(spec("embed.pos", &[h0 * w0, c0], Init::Zeros));
    for t in Task::ALL {
        out.push(spec(format!("prompt.{}.spatial", t.name()), &[c0], Init::Normal(0.02)));
        for s in 0..bb.num_stages() {
            out.push(spec(
                format!("prompt.{}.channel.s{s}", t.name()),
                &[bb.stage_channels(s)],
                Init::Normal(0.02),
            ));
        }
    }
    for s in 0..bb.num_stages() {
        let c = bb.stage_channels(s);
        for l in 0..bb.stage_depths[s] {
            let pre = format!("stage{s}.block{l}");
            layer_norm(&mut out, &format!("{pre}.ln1"), c);
            linear(&mut out, &format!("{pre}.qkv"), c, 3 * c);
            linear(&mut out, &format!("{pre}.proj"), c, c);
            layer_norm(&mut out, &format!("{pre}.ln2"), c);
            linear(&mut out, &format!("{pre}.fc1"), c, bb.mlp_ratio * c);
            linear(&mut out, &format!("{pre}.fc2"), bb.mlp_ratio * c, c);
        }
        if s + 1 < bb.num_stages() {
            linear(&mut out, &format!("merge{s}"), 4 * c, 2 * c);
            for t in Task::ALL {
                linear(&mut out, &format!("merge{s}.prompt.{}", t.name()), c, 2 * c);
            }
        }
    }
    let d = cfg.decoder_channels;
    for t in Task::ALL {
        for s in 0..bb.num_stages() {
            let c = bb.stage_channels(s);
            linear(&mut out, &format!("decode.{}.s{s}.spatial", t.name()), c, c);
            linear(&mut out, &format!("decode.{}.s{s}.fuse", t.name()), c, d);
        }
    }
    let conv_std = (2.0 / (9 * d) as f64).sqrt();
    for t in Task::ALL {
        let pre = format!("head.{}", t.name());
        out.push(spec(format!("{pre}.conv.w"), &[d, d, 3, 3], Init::Normal(conv_std)));
        out.push(spec(format!("{pre}.bn.g"), &[d], Init::Ones));
        out.push(spec(format!("{pre}.bn.b"), &[d], Init::Zeros));
        let branches: Vec<(&str, usize)> = match t {
            Task::Semseg => vec![("out", cfg.num_semseg_classes)],
            Task::Depth => vec![("out", 1)],
            Task::Det => det_branches(cfg.num_det_classes).to_vec(),
        };
        for (name, k) in branches {
            out.push(spec(format!("{pre}.{name}.w"), &[k, d, 1, 1], Init::Normal(0.01)));
            let bias = if t == Task::Det && name == "cls" {
                // focal-loss prior: initial foreground probability 0.01
                Init::Const(-(99.0f64).ln())
            } else {
                Init::Zeros
            };
            out.push(spec(format!("{pre}.{name}.b"), &[k], bias));
        }
    }
    out
}

/// Batch-norm running statistics.
pub fn buffer_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_channels;
    Task::ALL
        .iter()
        .flat_map(|t| {
            [
                spec(format!("head.{}.bn.mean", t.name()), &[d], Init::Zeros),
                spec(format!("head.{}.bn.var", t.name()), &[d], Init::Ones),
            ]
        })
        .collect()
}

/// The task a parameter belongs to, or `None` for shared backbone parameters.
pub fn task_of(name: &str) -> Option<Task> {
    let parts: Vec<&str> = name.split('.').collect();
    let owner = match parts.as_slice() {
        ["prompt" | "decode" | "head", t, ..] => *t,
        [m, "prompt", t, ..] if m.starts_with("merge") => *t,
        _ => return None,
    };
    Task::ALL.into_iter().find(|t| t.name() == owner)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

fn materialize(specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng) -> Result<IndexMap<String, Tensor<f32>>> {
    let mut out = IndexMap::new();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data = match s.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v as f32; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
        };
        out.insert(s.name, Tensor::new(&s.shape, data)?);
    }
    Ok(out)
}

impl ParamStore {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            params: materialize(param_specs(cfg), &mut rng)?,
            buffers: materialize(buffer_specs(cfg), &mut rng)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<f32>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer {name}")))
    }

    /// Adds every parameter to `g`; with `trainable` false they are constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.cast(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Momentum update of running statistics from train-mode batch statistics.
    /// The running variance tracks the unbiased batch variance.
    pub fn update_bn(&mut self, stats: &[(String, BnBatchStats)], momentum: f64) -> Result<()> {
        for (prefix, st) in stats {
            let unbias = st.count as f64 / (st.count as f64 - 1.0);
            for (suffix, batch, scale) in [("mean", &st.mean, 1.0), ("var", &st.var, unbias)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Contract(format!("unknown buffer {name}")))?;
                if buf.numel() != batch.len() {
                    return Err(Error::shape("update_bn", buf.shape(), &[batch.len()]));
                }
                for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = ((1.0 - momentum) * *r as f64 + momentum * b * scale) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Handles for an explicit set of nodes, e.g. inputs of a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand count for the default configuration.
    fn closed_form(cfg: &ModelConfig) -> usize {
        let bb = &cfg.backbone;
        let (c0, p, d, t) = (bb.base_channels, bb.patch_size, cfg.decoder_channels, 3);
        let (h0, w0) = (bb.image_size[0] / p, bb.image_size[1] / p);
        let r = bb.mlp_ratio;
        let mut n = 3 * p * p * c0 + c0 + h0 * w0 * c0;
        n += t * c0;
        let stages = bb.stage_depths.len();
        for s in 0..stages {
            let c = c0 << s;
            n += t * c; // channel prompts
                        // ln1, qkv, proj, ln2, fc1, fc2
            let block = 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + 2 * c + (c * r * c + r * c) + (r * c * c + c);
            n += bb.stage_depths[s] * block;
            if s + 1 < stages {
                n += 4 * c * 2 * c + 2 * c + t * (c * 2 * c + 2 * c);
            }
            n += t * ((c * c + c) + (c * d + d));
        }
        let head_trunk = d * d * 9 + 2 * d;
        n += 3 * head_trunk;
        n += (d * cfg.num_semseg_classes + cfg.num_semseg_classes) + (d + 1);
        let det_out = cfg.num_det_classes + 1 + 2 + 1 + 3 + 3 + 2;
        n += d * det_out + det_out;
        n
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let cfg = ModelConfig::default();
        let store = ParamStore::init(&cfg, 0).unwrap();
        assert_eq!(store.num_params(), closed_form(&cfg));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(ParamStore::init(&cfg, 5).unwrap(), ParamStore::init(&cfg, 5).unwrap());
        assert_ne!(ParamStore::init(&cfg, 5).unwrap(), ParamStore::init(&cfg, 6).unwrap());
    }

    #[test]
    fn class_bias_prior() {
        let store = ParamStore::init(&ModelConfig::default(), 0).unwrap();
        let b = store.param("head.det.cls.b").unwrap();
        let p = crate::numerics::sigmoid(b.data()[0] as f64);
        assert!((p - 0.01).abs() < 1e-6);
    }

    #[test]
    fn task_ownership() {
        assert_eq!(task_of("prompt.semseg.spatial"), Some(Task::Semseg));
        assert_eq!(task_of("merge1.prompt.depth.w"), Some(Task::Depth));
        assert_eq!(task_of("head.det.depth.b"), Some(Task::Det));
        assert_eq!(task_of("decode.depth.s0.fuse.w"), Some(Task::Depth));
        assert_eq!(task_of("merge0.w"), None);
        assert_eq!(task_of("stage1.block0.qkv.w"), None);
        let store = ParamStore::init(&ModelConfig::default(), 0).unwrap();
        for t in Task::ALL {
            assert!(store.params.keys().any(|k| task_of(k) == Some(t)));
        }
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::init(&ModelConfig::default(), 0).unwrap();
        let stats = BnBatchStats {
            mean: vec![1.0; 64],
            var: vec![3.0; 64],
            count: 4,
        };
        store.update_bn(&[("head.det.bn".into(), stats)], 0.1).unwrap();
        assert!((store.buffer("head.det.bn.mean").unwrap().data()[0] - 0.1).abs() < 1e-7);
        // 0.9·1 + 0.1·(3·4/3)
        assert!((store.buffer("head.det.bn.var").unwrap().data()[0] - 1.3).abs() < 1e-6);
    }
}
