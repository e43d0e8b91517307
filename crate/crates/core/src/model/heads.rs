//! Conv3×3-BN-ReLU prediction heads with 1×1 output layers.

use super::params::{det_branches, Bound, ParamStore};
use super::{Mode, ModelConfig, Task};
use crate::error::Result;
use crate::geometry::DenseDetOutput;
use crate::numerics::{BnBatchStats, Graph, Real, Var};

/// Detection head outputs, each `[B × c × H₁ × W₁]`.
#[derive(Clone, Copy, Debug)]
pub struct DetVars {
    pub cls: Var,
    pub ctr: Var,
    pub offset: Var,
    /// Log-depth.
    pub depth: Var,
    /// Log length, width, height.
    pub dims: Var,
    /// Folded yaw, pitch, roll.
    pub rot: Var,
    pub dir: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[B × K × H₁ × W₁]` class logits.
    pub semseg: Var,
    /// `[B × 1 × H₁ × W₁]` log-depth.
    pub depth_log: Var,
    pub det: DetVars,
}

/// Shared trunk of every head; train mode records the batch statistics.
fn trunk<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore,
    bound: &Bound,
    prefix: &str,
    x: Var,
    mode: Mode,
    stats: &mut Vec<(String, BnBatchStats)>,
) -> Result<Var> {
    let y = g.conv2d(x, bound[&format!("{prefix}.conv.w")], None, 1, 1)?;
    let (gamma, beta) = (bound[&format!("{prefix}.bn.g")], bound[&format!("{prefix}.bn.b")]);
    let y = match mode {
        Mode::Train => {
            let (y, st) = g.batch_norm_train(y, gamma, beta, cfg.bn_eps)?;
            stats.push((format!("{prefix}.bn"), st));
            y
        }
        Mode::Eval => {
            let to64 = |name: String| -> Result<Vec<f64>> {
                Ok(params.buffer(&name)?.data().iter().map(|&v| v as f64).collect())
            };
            let mean = to64(format!("{prefix}.bn.mean"))?;
            let var = to64(format!("{prefix}.bn.var"))?;
            g.batch_norm_eval(y, gamma, beta, &mean, &var, cfg.bn_eps)?
        }
    };
    Ok(g.relu(y))
}

fn branch<T: Real>(g: &mut Graph<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.conv2d(
        x,
        bound[&format!("{prefix}.w")],
        Some(bound[&format!("{prefix}.b")]),
        1,
        0,
    )
}

/// Applies the three heads to the fused task features (in [`Task::ALL`] order).
pub fn forward_heads<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamStore,
    bound: &Bound,
    features: &[Var],
    mode: Mode,
    stats: &mut Vec<(String, BnBatchStats)>,
) -> Result<HeadOutputs> {
    let f = |t: Task| features[t.index()];
    let sem = trunk(g, cfg, params, bound, "head.semseg", f(Task::Semseg), mode, stats)?;
    let semseg = branch(g, bound, "head.semseg.out", sem)?;
    let dep = trunk(g, cfg, params, bound, "head.depth", f(Task::Depth), mode, stats)?;
    let depth_log = branch(g, bound, "head.depth.out", dep)?;
    let det = trunk(g, cfg, params, bound, "head.det", f(Task::Det), mode, stats)?;
    let mut outs = Vec::with_capacity(7);
    for (name, _) in det_branches(cfg.num_det_classes) {
        outs.push(branch(g, bound, &format!("head.det.{name}"), det)?);
    }
    let det = DetVars {
        cls: outs[0],
        ctr: outs[1],
        offset: outs[2],
        depth: outs[3],
        dims: outs[4],
        rot: outs[5],
        dir: outs[6],
    };
    Ok(HeadOutputs { semseg, depth_log, det })
}

/// Slice of image `b` from a `[B × c × H × W]` node, as f32.
pub fn image_slice<T: Real>(g: &Graph<T>, v: Var, b: usize) -> Vec<f32> {
    let s = g.shape(v);
    let per: usize = s[1..].iter().product();
    g.data(v)[b * per..(b + 1) * per]
        .iter()
        .map(|x| x.f64() as f32)
        .collect()
}

/// Dense detection outputs of image `b` in the layout the decoder expects.
pub fn dense_det_output<T: Real>(g: &Graph<T>, det: &DetVars, b: usize) -> DenseDetOutput {
    let s = g.shape(det.cls);
    DenseDetOutput {
        h: s[2],
        w: s[3],
        num_classes: s[1],
        class_logits: image_slice(g, det.cls, b),
        centerness: image_slice(g, det.ctr, b),
        offset: image_slice(g, det.offset, b),
        depth_raw: image_slice(g, det.depth, b),
        dims_raw: image_slice(g, det.dims, b),
        rot: image_slice(g, det.rot, b),
        dir_logits: image_slice(g, det.dir, b),
    }
}
