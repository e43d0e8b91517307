//! Window-attention transformer whose spatial task prompts join the attention
//! of every window.

use serde::{Deserialize, Serialize};

use super::params::Bound;
use super::windows::{attention_mask, batched, raster_order, window_order};
use super::{Task, NUM_TASKS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// `[H, W]` of the input images.
    pub image_size: [usize; 2],
    pub patch_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub base_channels: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: [64, 128],
            patch_size: 4,
            stage_depths: vec![2, 2, 2],
            stage_heads: vec![2, 4, 8],
            base_channels: 32,
            window_size: 4,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        (
            (self.image_size[0] / self.patch_size) >> s,
            (self.image_size[1] / self.patch_size) >> s,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        let p = self.patch_size;
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return cfg_err(format!("image size {h}x{w} is not divisible by patch size {p}"));
        }
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_heads.len() {
            return cfg_err("stage_depths and stage_heads must be non-empty and of equal length".into());
        }
        if self.base_channels == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return cfg_err("base_channels, window_size and mlp_ratio must be positive".into());
        }
        for s in 0..self.num_stages() {
            let (hs, ws) = ((h / p) >> s, (w / p) >> s);
            if (hs << s) * p != h || (ws << s) * p != w {
                return cfg_err(format!(
                    "stage {s}: token grid is not an exact halving of the previous one"
                ));
            }
            if hs % self.window_size != 0 || ws % self.window_size != 0 {
                return cfg_err(format!(
                    "stage {s}: token grid {hs}x{ws} is not divisible by window size {}",
                    self.window_size
                ));
            }
            let (c, heads) = (self.stage_channels(s), self.stage_heads[s]);
            if heads == 0 || c % heads != 0 {
                return cfg_err(format!("stage {s}: {heads} heads do not divide {c} channels"));
            }
            if self.stage_depths[s] == 0 {
                return cfg_err(format!("stage {s} has no layers"));
            }
        }
        Ok(())
    }
}

/// What one attention layer exposes for prompt decoding.
#[derive(Clone, Copy, Debug)]
pub struct LayerRecord {
    /// Stitched prompt-to-patch affinity `[B × T × heads × N]`.
    pub affinity: Var,
    /// Value-projected patch tokens `[B × N × C]`, raster order, head-major channels.
    pub values: Var,
    /// Width of the spatial prompts entering the layer.
    pub prompt_width: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub grid: (usize, usize),
    pub channels: usize,
    pub heads: usize,
    /// `[B·N × C]` patch tokens after the last layer.
    pub tokens: Var,
    /// `[B × T × C]` spatial prompts after the last layer.
    pub prompts: Var,
    pub layers: Vec<LayerRecord>,
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Non-overlapping `p×p` patches of `[B×3×H×W]` images, linearly projected,
/// plus a learned positional bias. Returns `[B·N × C]`.
pub fn patch_embed<T: Real>(g: &mut Graph<T>, images: Var, w: Var, b: Var, pos: Var, p: usize) -> Result<Var> {
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("patch_embed", &s, &[3]));
    }
    let (bsz, h, wd) = (s[0], s[2], s[3]);
    if p == 0 || h % p != 0 || wd % p != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{wd} is not divisible by patch size {p}"
        )));
    }
    let (hp, wp) = (h / p, wd / p);
    let x = g.reshape(images, &[bsz, 3, hp, p, wp, p])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = g.reshape(x, &[bsz * hp * wp, 3 * p * p])?;
    let x = linear(g, x, w, b)?;
    let c = g.shape(x)[1];
    let x = g.reshape(x, &[bsz, hp * wp, c])?;
    let x = g.add(x, pos)?;
    g.reshape(x, &[bsz * hp * wp, c])
}

/// Copies `[B × T × C]` prompts into each of `n` windows: `[B·n × T × C]`.
/// The backward pass sums the copies' gradients into the source.
pub fn duplicate_prompts<T: Real>(g: &mut Graph<T>, prompts: Var, n: usize) -> Result<Var> {
    let s = g.shape(prompts).to_vec();
    if s.len() != 3 || n == 0 {
        return Err(Error::shape("duplicate_prompts", &s, &[n]));
    }
    let flat = g.reshape(prompts, &[s[0], s[1] * s[2]])?;
    let idx: Vec<usize> = (0..s[0]).flat_map(|b| std::iter::repeat_n(b, n)).collect();
    let rep = g.index_select(flat, 0, &idx)?;
    g.reshape(rep, &[s[0] * n, s[1], s[2]])
}

/// Mean over the `n` windows of each image: `[B·n × T × C]` → `[B × T × C]`.
pub fn average_window_prompts<T: Real>(g: &mut Graph<T>, per_window: Var, n: usize) -> Result<Var> {
    let s = g.shape(per_window).to_vec();
    if s.len() != 3 || n == 0 || !s[0].is_multiple_of(n) {
        return Err(Error::shape("average_window_prompts", &s, &[n]));
    }
    let b = s[0] / n;
    let x = g.reshape(per_window, &[b, n, s[1] * s[2]])?;
    let m = g.mean_axis(x, 1, false)?;
    g.reshape(m, &[b, s[1], s[2]])
}

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    /// `[C × 3C]` query/key/value projection and its bias.
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl AttnParams {
    fn bind(bound: &Bound, prefix: &str) -> Self {
        Self {
            qkv_w: bound[&format!("{prefix}.qkv.w")],
            qkv_b: bound[&format!("{prefix}.qkv.b")],
            proj_w: bound[&format!("{prefix}.proj.w")],
            proj_b: bound[&format!("{prefix}.proj.b")],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnOutput {
    /// `[G × w² × C]`
    pub tokens: Var,
    /// `[G × T × C]`
    pub prompts: Var,
    /// Prompt-to-patch attention renormalized over the patches: `[G × heads × T × w²]`.
    pub affinity: Var,
    /// Per-head values of the patch tokens: `[G × heads × w² × C/heads]`.
    pub values: Var,
}

/// Multi-head self-attention over `[w² patches ; T prompts]` in each of `G` windows.
pub fn window_attention_with_prompts<T: Real>(
    g: &mut Graph<T>,
    window_tokens: Var,
    window_prompts: Var,
    p: &AttnParams,
    heads: usize,
) -> Result<AttnOutput> {
    let (st, sp) = (g.shape(window_tokens).to_vec(), g.shape(window_prompts).to_vec());
    if st.len() != 3 || sp.len() != 3 || st[0] != sp[0] || st[2] != sp[2] {
        return Err(Error::shape("window_attention", &st, &sp));
    }
    let (gw, ww, c, t) = (st[0], st[1], st[2], sp[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let (l, dh) = (ww + t, c / heads);
    let x = g.concat(&[window_tokens, window_prompts], 1)?;
    let x = g.reshape(x, &[gw * l, c])?;
    let qkv = linear(g, x, p.qkv_w, p.qkv_b)?;
    let qkv = g.reshape(qkv, &[gw, l, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, gw * heads, l, dh])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = g.narrow(qkv, 0, i, 1)?;
        *part = g.reshape(s, &[gw * heads, l, dh])?;
    }
    let [q, k, v] = parts;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask = g.constant(Tensor::from_f64(&[l, l], &attention_mask(ww, t))?);
    let scores = g.add(scores, mask)?;
    let attn = g.softmax(scores);
    let out = g.matmul(attn, v)?;
    let out = g.reshape(out, &[gw, heads, l, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[gw * l, c])?;
    let out = linear(g, out, p.proj_w, p.proj_b)?;
    let out = g.reshape(out, &[gw, l, c])?;
    let tokens = g.narrow(out, 1, 0, ww)?;
    let prompts = g.narrow(out, 1, ww, t)?;

    let attn = g.reshape(attn, &[gw, heads, l, l])?;
    let rows = g.narrow(attn, 2, ww, t)?;
    let rows = g.narrow(rows, 3, 0, ww)?;
    let mass = g.sum_axis(rows, 3, true)?;
    let affinity = g.div(rows, mass)?;
    let v = g.reshape(v, &[gw, heads, l, dh])?;
    let values = g.narrow(v, 2, 0, ww)?;
    Ok(AttnOutput {
        tokens,
        prompts,
        affinity,
        values,
    })
}

/// Concatenates each 2×2 neighbourhood (order: top-left, top-right,
/// bottom-left, bottom-right) and projects `4C → 2C`; each task's prompt goes
/// through its own `C → 2C` map.
#[allow(clippy::too_many_arguments)]
pub fn patch_merging<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    batch: usize,
    grid: (usize, usize),
    merge: (Var, Var),
    prompts: Var,
    prompt_maps: &[(Var, Var)],
) -> Result<(Var, Var)> {
    let (hs, ws) = grid;
    if hs % 2 != 0 || ws % 2 != 0 {
        return Err(Error::Config(format!(
            "patch merging needs an even grid, got {hs}x{ws}"
        )));
    }
    let c = g.shape(tokens)[1];
    let x = g.reshape(tokens, &[batch, hs / 2, 2, ws / 2, 2, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[batch * hs * ws / 4, 4 * c])?;
    let merged = linear(g, x, merge.0, merge.1)?;

    let t = g.shape(prompts)[1];
    if prompt_maps.len() != t {
        return Err(Error::Contract(format!(
            "{} prompt maps for {t} prompts",
            prompt_maps.len()
        )));
    }
    let mut out = Vec::with_capacity(t);
    for (i, &(w, b)) in prompt_maps.iter().enumerate() {
        let pi = g.narrow(prompts, 1, i, 1)?;
        let pi = g.reshape(pi, &[batch, c])?;
        let pi = linear(g, pi, w, b)?;
        out.push(g.reshape(pi, &[batch, 1, 2 * c])?);
    }
    let prompts = g.concat(&out, 1)?;
    Ok((merged, prompts))
}

/// One prompted transformer block. `tokens`: `[B·N × C]`, `prompts`: `[B × T × C]`.
#[allow(clippy::too_many_arguments)]
fn block<T: Real>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    tokens: Var,
    prompts: Var,
    batch: usize,
    grid: (usize, usize),
    w: usize,
    heads: usize,
) -> Result<(Var, Var, LayerRecord)> {
    let (hs, ws) = grid;
    let n = hs * ws;
    let c = g.shape(tokens)[1];
    let prompt_width = g.shape(prompts)[2];
    if prompt_width != c {
        return Err(Error::Contract(format!(
            "{prefix}: prompt width {prompt_width} differs from token width {c}"
        )));
    }
    let t = g.shape(prompts)[1];
    let nw = n / (w * w);
    let gw = batch * nw;
    let p = |s: &str| bound[&format!("{prefix}.{s}")];

    let flat_prompts = g.reshape(prompts, &[batch * t, c])?;
    let all = g.concat(&[tokens, flat_prompts], 0)?;
    let normed = g.layer_norm(all, p("ln1.g"), p("ln1.b"), LN_EPS)?;
    let ntok = g.narrow(normed, 0, 0, batch * n)?;
    let nprm = g.narrow(normed, 0, batch * n, batch * t)?;
    let nprm = g.reshape(nprm, &[batch, t, c])?;

    let fwd = batched(&window_order(hs, ws, w), batch);
    let inv = batched(&raster_order(hs, ws, w), batch);
    let win = g.index_select(ntok, 0, &fwd)?;
    let win = g.reshape(win, &[gw, w * w, c])?;
    let dup = duplicate_prompts(g, nprm, nw)?;
    let att = window_attention_with_prompts(g, win, dup, &AttnParams::bind(bound, prefix), heads)?;

    let back = g.reshape(att.tokens, &[gw * w * w, c])?;
    let back = g.index_select(back, 0, &inv)?;
    let avg = average_window_prompts(g, att.prompts, nw)?;
    let avg = g.reshape(avg, &[batch * t, c])?;
    let attn_out = g.concat(&[back, avg], 0)?;
    let all = g.add(all, attn_out)?;

    let h = g.layer_norm(all, p("ln2.g"), p("ln2.b"), LN_EPS)?;
    let h = linear(g, h, p("fc1.w"), p("fc1.b"))?;
    let h = g.gelu(h);
    let h = linear(g, h, p("fc2.w"), p("fc2.b"))?;
    let all = g.add(all, h)?;
    let tokens = g.narrow(all, 0, 0, batch * n)?;
    let prompts = g.narrow(all, 0, batch * n, batch * t)?;
    let prompts = g.reshape(prompts, &[batch, t, c])?;

    let record = stitch_record(g, &att, batch, grid, w, heads, t, prompt_width)?;
    Ok((tokens, prompts, record))
}

#[allow(clippy::too_many_arguments)]
fn stitch_record<T: Real>(
    g: &mut Graph<T>,
    att: &AttnOutput,
    batch: usize,
    grid: (usize, usize),
    w: usize,
    heads: usize,
    t: usize,
    prompt_width: usize,
) -> Result<LayerRecord> {
    let (hs, ws) = grid;
    let (n, ww) = (hs * ws, w * w);
    let nw = n / ww;
    let c = g.shape(att.tokens)[2];
    let a = g.reshape(att.affinity, &[batch, nw, heads, t, ww])?;
    let a = g.permute(a, &[0, 3, 2, 1, 4])?;
    let a = g.reshape(a, &[batch, t, heads, n])?;
    let affinity = g.index_select(a, 3, &raster_order(hs, ws, w))?;
    let v = g.permute(att.values, &[0, 2, 1, 3])?;
    let v = g.reshape(v, &[batch * n, c])?;
    let v = g.index_select(v, 0, &batched(&raster_order(hs, ws, w), batch))?;
    let values = g.reshape(v, &[batch, n, c])?;
    Ok(LayerRecord {
        affinity,
        values,
        prompt_width,
    })
}

/// Initial spatial prompts broadcast over the batch: `[B × T × C₀]`.
fn initial_prompts<T: Real>(g: &mut Graph<T>, bound: &Bound, batch: usize) -> Result<Var> {
    let mut rows = Vec::with_capacity(NUM_TASKS);
    for t in Task::ALL {
        let p = bound[&format!("prompt.{}.spatial", t.name())];
        let c = g.shape(p)[0];
        rows.push(g.reshape(p, &[1, c])?);
    }
    let c = g.shape(rows[0])[1];
    let all = g.concat(&rows, 1)?;
    let all = g.index_select(all, 0, &vec![0; batch])?;
    g.reshape(all, &[batch, NUM_TASKS, c])
}

/// Runs the whole backbone on `[B×3×H×W]` images.
pub fn forward_backbone<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    bound: &Bound,
    images: Var,
) -> Result<Vec<StageOutput>> {
    cfg.validate()?;
    let s = g.shape(images).to_vec();
    if s.len() != 4 || s[2..] != cfg.image_size {
        return Err(Error::Config(format!(
            "input shape {s:?} does not match the configured image size {:?}",
            cfg.image_size
        )));
    }
    let batch = s[0];
    let mut tokens = patch_embed(
        g,
        images,
        bound["embed.w"],
        bound["embed.b"],
        bound["embed.pos"],
        cfg.patch_size,
    )?;
    let mut prompts = initial_prompts(g, bound, batch)?;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    for st in 0..cfg.num_stages() {
        let grid = cfg.stage_grid(st);
        let heads = cfg.stage_heads[st];
        let mut layers = Vec::with_capacity(cfg.stage_depths[st]);
        for l in 0..cfg.stage_depths[st] {
            let prefix = format!("stage{st}.block{l}");
            let (tk, pr, rec) = block(g, bound, &prefix, tokens, prompts, batch, grid, cfg.window_size, heads)?;
            tokens = tk;
            prompts = pr;
            layers.push(rec);
        }
        stages.push(StageOutput {
            grid,
            channels: cfg.stage_channels(st),
            heads,
            tokens,
            prompts,
            layers,
        });
        if st + 1 < cfg.num_stages() {
            let maps: Vec<(Var, Var)> = Task::ALL
                .iter()
                .map(|t| {
                    let pre = format!("merge{st}.prompt.{}", t.name());
                    (bound[&format!("{pre}.w")], bound[&format!("{pre}.b")])
                })
                .collect();
            let merge = (bound[&format!("merge{st}.w")], bound[&format!("merge{st}.b")]);
            (tokens, prompts) = patch_merging(g, tokens, batch, grid, merge, prompts, &maps)?;
        }
    }
    Ok(stages)
}
