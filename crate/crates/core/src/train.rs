//! Training loop: deterministic batches, forward, multi-task loss, backward,
//! Adam and the batch-norm running update.
//!
//! The learning rate is constant and no augmentation is applied.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::inference::check_compatible;
use crate::losses::{multitask_loss, BatchTargets, LossBreakdown};
use crate::model::{forward, stack_images, Mode};
use crate::numerics::{Graph, Tensor};
use crate::scene::SceneSample;

/// Sample indices of the batch for `iteration`: a pure function of
/// `(seed, iteration)`. Epochs are independent ChaCha8 permutations.
pub fn batch_indices(seed: u64, iteration: usize, batch_size: usize, num_samples: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let p = iteration * batch_size + j;
            let epoch = p / num_samples;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..num_samples).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[p % num_samples]
        })
        .collect()
}

/// One optimisation step on the next batch; advances `ck.iteration`.
pub fn train_step(ck: &mut Checkpoint, samples: &[SceneSample]) -> Result<LossBreakdown> {
    let it = ck.iteration;
    let cfg = &ck.config;
    let idx = batch_indices(cfg.seed, it, cfg.batch_size, samples.len());
    let batch: Vec<&SceneSample> = idx.iter().map(|&i| &samples[i]).collect();
    let model = &cfg.model;

    let mut g = Graph::<f32>::new();
    let bound = ck.params.bind(&mut g, true);
    let images: Tensor<f32> = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let images = g.constant(images);
    let out = forward(&mut g, model, &ck.params, &bound, images, Mode::Train)?;
    let targets = BatchTargets::from_samples(&batch, model.feature_grid(), model.stride(), model.num_det_classes)?;
    let (vars, breakdown) = multitask_loss(&mut g, &out.heads, &targets, &cfg.loss_weights)?;
    if let Some(what) = breakdown.non_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
            iteration: it + 1,
        });
    }
    if breakdown.semseg_all_ignored {
        log::warn!("iteration {}: every semseg pixel of the batch is ignored", it + 1);
    }
    g.backward(vars.total)?;

    let mut grads = Vec::with_capacity(ck.params.params.len());
    for (name, v) in bound.iter() {
        let grad = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        };
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                iteration: it + 1,
            });
        }
        grads.push(grad);
    }
    let momentum = model.bn_momentum;
    let items = ck
        .params
        .params
        .iter_mut()
        .zip(&grads)
        .map(|((n, t), gr)| (n.as_str(), t, gr.as_slice()));
    ck.adam.step(items)?;
    ck.params.update_bn(&out.bn_stats, momentum)?;
    ck.iteration += 1;
    Ok(breakdown)
}

/// Trains until `ck.iteration == ck.config.iterations`, calling `on_step`
/// after every step with the completed iteration count.
pub fn train<F>(ck: &mut Checkpoint, samples: &[SceneSample], mut on_step: F) -> Result<()>
where
    F: FnMut(&Checkpoint, &LossBreakdown) -> Result<()>,
{
    check_compatible(&ck.config, samples)?;
    while ck.iteration < ck.config.iterations {
        let b = train_step(ck, samples)?;
        on_step(ck, &b)?;
    }
    Ok(())
}

/// Replaces the batch-norm running statistics with population statistics of
/// `samples` under the current weights (mean and unbiased variance pooled
/// over every head pixel). Parameters and the optimizer are untouched.
///
/// With small batches the momentum average lags the weights; this makes
/// eval-mode normalization match what the heads saw in training.
pub fn recalibrate_bn(ck: &mut Checkpoint, samples: &[SceneSample]) -> Result<()> {
    check_compatible(&ck.config, samples)?;
    let cfg = &ck.config;
    // per buffer prefix: (count, Σx, Σx²) per channel
    let mut acc: Vec<(String, f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for chunk in samples.chunks(cfg.batch_size.max(2)) {
        let mut g = Graph::<f32>::new();
        let bound = ck.params.bind(&mut g, false);
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let images = g.constant(images);
        let out = forward(&mut g, &cfg.model, &ck.params, &bound, images, Mode::Train)?;
        if acc.is_empty() {
            acc = out
                .bn_stats
                .iter()
                .map(|(n, s)| (n.clone(), 0.0, vec![0.0; s.mean.len()], vec![0.0; s.mean.len()]))
                .collect();
        }
        for ((_, n, s1, s2), (_, st)) in acc.iter_mut().zip(&out.bn_stats) {
            let c = st.count as f64;
            *n += c;
            for (i, (&m, &v)) in st.mean.iter().zip(&st.var).enumerate() {
                s1[i] += c * m;
                s2[i] += c * (v + m * m);
            }
        }
    }
    for (prefix, n, s1, s2) in acc {
        let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
        let var: Vec<f64> = s2
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0) * n / (n - 1.0))
            .collect();
        for (suffix, vals) in [("mean", mean), ("var", var)] {
            let name = format!("{prefix}.{suffix}");
            let buf = ck
                .params
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Contract(format!("unknown buffer {name}")))?;
            for (b, v) in buf.data_mut().iter_mut().zip(vals) {
                *b = v as f32;
            }
        }
    }
    Ok(())
}

pub const LOG_HEADER: &str = "iter,semseg_ce,depth_l1,det_cls,det_reg,det_dir,det_ctr,total";

/// CSV loss log, one row per completed iteration.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(Self { out })
    }

    /// Appends to an existing log without repeating the header.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn row(&mut self, iteration: usize, b: &LossBreakdown) -> std::io::Result<()> {
        write!(self.out, "{iteration}")?;
        for (_, v) in b.components() {
            write!(self.out, ",{v}")?;
        }
        writeln!(self.out)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene::{generate_all, GenSpec};

    pub(crate) fn tiny() -> (RunConfig, Vec<SceneSample>) {
        let mut c = RunConfig::default();
        c.model.backbone.image_size = [16, 32];
        c.model.backbone.stage_depths = vec![1, 1];
        c.model.backbone.stage_heads = vec![1, 2];
        c.model.backbone.base_channels = 8;
        c.model.backbone.window_size = 2;
        c.model.decoder_channels = 8;
        c.iterations = 4;
        c.seed = 5;
        let spec = GenSpec {
            seed: 2,
            num_scenes: 3,
            height: 16,
            width: 32,
            ..GenSpec::default()
        };
        (c, generate_all(&spec).unwrap())
    }

    #[test]
    fn batches_are_pure_and_cover_each_epoch() {
        for it in 0..20 {
            assert_eq!(batch_indices(9, it, 3, 8), batch_indices(9, it, 3, 8));
        }
        let all: Vec<usize> = (0..4).flat_map(|it| batch_indices(9, it, 2, 8)).collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_ne!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let (mut c, data) = tiny();
        c.iterations = 0;
        let mut ck = Checkpoint::init(c.clone()).unwrap();
        train(&mut ck, &data, |_, _| Ok(())).unwrap();
        assert_eq!(ck, Checkpoint::init(c).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (c, data) = tiny();
        let mut full = Checkpoint::init(c.clone()).unwrap();
        train(&mut full, &data, |_, _| Ok(())).unwrap();

        let mut half_cfg = c.clone();
        half_cfg.iterations = 2;
        let mut part = Checkpoint::init(half_cfg).unwrap();
        train(&mut part, &data, |_, _| Ok(())).unwrap();
        let bytes = part.to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        resumed.config.iterations = c.iterations;
        train(&mut resumed, &data, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());
    }

    #[test]
    fn training_changes_params_and_running_stats() {
        let (c, data) = tiny();
        let init = Checkpoint::init(c).unwrap();
        let mut ck = init.clone();
        let mut rows = Vec::new();
        train(&mut ck, &data, |ck, b| {
            rows.push((ck.iteration, b.total));
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3, 4]);
        assert!(rows.iter().all(|r| r.1.is_finite()));
        assert_ne!(ck.params.params, init.params.params);
        assert_ne!(ck.params.buffers, init.params.buffers);
        assert_eq!(ck.adam.t, 4);
    }

    #[test]
    fn non_finite_loss_names_component_and_iteration() {
        let (c, data) = tiny();
        let mut ck = Checkpoint::init(c).unwrap();
        train_step(&mut ck, &data).unwrap();
        for v in ck.params.params.get_mut("head.depth.out.b").unwrap().data_mut() {
            *v = f32::INFINITY;
        }
        match train_step(&mut ck, &data) {
            Err(Error::NonFinite { what, iteration }) => {
                assert_eq!(what, "depth_l1");
                assert_eq!(iteration, 2);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn recalibration_gives_population_stats() {
        let (c, data) = tiny();
        let mut ck = Checkpoint::init(c).unwrap();
        train(&mut ck, &data, |_, _| Ok(())).unwrap();
        let before = ck.params.params.clone();
        recalibrate_bn(&mut ck, &data).unwrap();
        assert_eq!(ck.params.params, before);

        // oracle: the whole set as one batch
        let mut g = Graph::<f32>::new();
        let bound = ck.params.bind(&mut g, false);
        let x = g.constant(stack_images(&data.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap());
        let out = forward(&mut g, &ck.config.model, &ck.params, &bound, x, Mode::Train).unwrap();
        for (prefix, st) in &out.bn_stats {
            let n = st.count as f64;
            let mean = &ck.params.buffers[&format!("{prefix}.mean")];
            let var = &ck.params.buffers[&format!("{prefix}.var")];
            for i in 0..st.mean.len() {
                assert!((mean.data()[i] as f64 - st.mean[i]).abs() < 1e-4 * (1.0 + st.mean[i].abs()));
                let v = st.var[i] * n / (n - 1.0);
                assert!((var.data()[i] as f64 - v).abs() < 1e-3 * (1.0 + v));
            }
        }
    }

    #[test]
    fn log_format() {
        let mut buf = Vec::new();
        let mut log = LossLog::new(&mut buf).unwrap();
        let b = LossBreakdown {
            semseg_ce: 1.5,
            depth_l1: 2.0,
            det_cls_focal: 0.25,
            det_reg_smooth_l1: 0.5,
            det_dir_ce: 0.125,
            det_ctr_ce: 0.75,
            total: 153.625,
            semseg_all_ignored: false,
        };
        log.row(1, &b).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, format!("{LOG_HEADER}\n1,1.5,2,0.25,0.5,0.125,0.75,153.625\n"));
    }
}
