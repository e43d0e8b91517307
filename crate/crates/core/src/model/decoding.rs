//! Dense spatial and channel prompt decoding into per-task feature maps.
//!
//! Decoded maps stay in token layout `[B × N × C]` (raster order) until the
//! fusion step turns them into `[B × D × H₁ × W₁]` images.

use super::backbone::StageOutput;
use super::params::Bound;
use super::{ModelConfig, Task};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

/// `w² · affinity[h, p] · value_h[p]` for every head `h` and position `p`,
/// heads concatenated. `affinity`: `[B × heads × N]`, `values`: `[B × N × C]`.
pub fn affinity_gate<T: Real>(g: &mut Graph<T>, affinity: Var, values: Var, window_area: usize) -> Result<Var> {
    let (sa, sv) = (g.shape(affinity).to_vec(), g.shape(values).to_vec());
    if sa.len() != 3 || sv.len() != 3 || sa[0] != sv[0] || sa[2] != sv[1] || sv[2] % sa[1] != 0 {
        return Err(Error::shape("spatial_decode", &sa, &sv));
    }
    let (b, heads, n, c) = (sa[0], sa[1], sa[2], sv[2]);
    let a = g.permute(affinity, &[0, 2, 1])?;
    let a = g.reshape(a, &[b, n, heads, 1])?;
    let v = g.reshape(values, &[b, n, heads, c / heads])?;
    let out = g.mul(a, v)?;
    let out = g.reshape(out, &[b, n, c])?;
    Ok(g.scale(out, window_area as f64))
}

/// [`affinity_gate`] followed by a `C → C` projection.
pub fn spatial_decode<T: Real>(
    g: &mut Graph<T>,
    affinity: Var,
    values: Var,
    window_area: usize,
    proj: (Var, Var),
) -> Result<Var> {
    let gated = affinity_gate(g, affinity, values, window_area)?;
    let s = g.shape(gated).to_vec();
    let x = g.reshape(gated, &[s[0] * s[1], s[2]])?;
    let x = g.matmul(x, proj.0)?;
    let x = g.add(x, proj.1)?;
    g.reshape(x, &s)
}

/// Reweights channels by `C · softmax(prompt)`; identity at a zero prompt.
pub fn channel_decode<T: Real>(g: &mut Graph<T>, tokens: Var, prompt: Var) -> Result<Var> {
    let c = *g.shape(tokens).last().unwrap_or(&0);
    if g.shape(prompt) != [c] {
        return Err(Error::shape("channel_decode", g.shape(tokens), g.shape(prompt)));
    }
    let p = g.reshape(prompt, &[1, c])?;
    let gate = g.softmax(p);
    let gate = g.scale(gate, c as f64);
    let gate = g.reshape(gate, &[c])?;
    g.mul(tokens, gate)
}

/// One stage's decoded pair for a task.
#[derive(Clone, Copy, Debug)]
pub struct StageDecode {
    pub spatial: Var,
    pub channel: Var,
    pub grid: (usize, usize),
}

/// Per stage: `spatial + channel`, `1×1` projection to `D`, bilinear resize to
/// `out_grid`; then the sum over stages. Returns `[B × D × H₁ × W₁]`.
pub fn fuse_task_features<T: Real>(
    g: &mut Graph<T>,
    stages: &[StageDecode],
    fuse: &[(Var, Var)],
    out_grid: (usize, usize),
) -> Result<Var> {
    if stages.is_empty() || stages.len() != fuse.len() {
        return Err(Error::Contract(format!(
            "{} decoded stages for {} fusion layers",
            stages.len(),
            fuse.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (sd, &(w, b)) in stages.iter().zip(fuse) {
        let s = g.shape(sd.spatial).to_vec();
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let (hs, ws) = sd.grid;
        if n != hs * ws {
            return Err(Error::shape("fuse_task_features", &s, &[hs, ws]));
        }
        let x = g.add(sd.spatial, sd.channel)?;
        let x = g.reshape(x, &[bsz * n, c])?;
        let x = g.matmul(x, w)?;
        let x = g.add(x, b)?;
        let d = g.shape(x)[1];
        let x = g.reshape(x, &[bsz, n, d])?;
        let x = g.permute(x, &[0, 2, 1])?;
        let mut x = g.reshape(x, &[bsz, d, hs, ws])?;
        if (hs, ws) != out_grid {
            x = g.upsample_bilinear(x, out_grid.0, out_grid.1)?;
        }
        acc = Some(match acc {
            None => x,
            Some(a) => g.add(a, x)?,
        });
    }
    Ok(acc.expect("at least one stage"))
}

/// Decodes the last attention layer of every stage into task `t`'s feature map.
pub fn decode_task<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    bound: &Bound,
    stages: &[StageOutput],
    t: Task,
) -> Result<Var> {
    let ww = cfg.backbone.window_size * cfg.backbone.window_size;
    let mut decoded = Vec::with_capacity(stages.len());
    let mut fuse = Vec::with_capacity(stages.len());
    for (s, st) in stages.iter().enumerate() {
        let rec = st
            .layers
            .last()
            .ok_or_else(|| Error::Contract(format!("stage {s} has no layers")))?;
        let n = st.grid.0 * st.grid.1;
        let bsz = g.shape(rec.values)[0];
        let aff = g.narrow(rec.affinity, 1, t.index(), 1)?;
        let aff = g.reshape(aff, &[bsz, st.heads, n])?;
        let pre = format!("decode.{}.s{s}", t.name());
        let proj = (bound[&format!("{pre}.spatial.w")], bound[&format!("{pre}.spatial.b")]);
        let spatial = spatial_decode(g, aff, rec.values, ww, proj)?;
        let tokens = g.reshape(st.tokens, &[bsz, n, st.channels])?;
        let channel = channel_decode(g, tokens, bound[&format!("prompt.{}.channel.s{s}", t.name())])?;
        decoded.push(StageDecode {
            spatial,
            channel,
            grid: st.grid,
        });
        fuse.push((bound[&format!("{pre}.fuse.w")], bound[&format!("{pre}.fuse.b")]));
    }
    fuse_task_features(g, &decoded, &fuse, cfg.feature_grid())
}
