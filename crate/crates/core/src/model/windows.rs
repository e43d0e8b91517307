//! Index bookkeeping for non-overlapping window partitions.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// For every window-ordered position, the raster position it came from.
///
/// Windows are visited in raster order and positions inside a window in raster
/// order, so window `r, c` occupies rows `[r·w, (r+1)·w)` and columns
/// `[c·w, (c+1)·w)` of the grid.
pub fn window_order(hs: usize, ws: usize, w: usize) -> Vec<usize> {
    let (nr, nc) = (hs / w, ws / w);
    let mut out = Vec::with_capacity(hs * ws);
    for wr in 0..nr {
        for wc in 0..nc {
            for i in 0..w {
                for j in 0..w {
                    out.push((wr * w + i) * ws + wc * w + j);
                }
            }
        }
    }
    out
}

/// Inverse of [`window_order`]: for every raster position, its window-ordered index.
pub fn raster_order(hs: usize, ws: usize, w: usize) -> Vec<usize> {
    let fwd = window_order(hs, ws, w);
    let mut inv = vec![0; fwd.len()];
    for (q, &p) in fwd.iter().enumerate() {
        inv[p] = q;
    }
    inv
}

/// [`window_order`] repeated over a batch of `b` grids laid out image-major.
pub fn batched(order: &[usize], b: usize) -> Vec<usize> {
    let n = order.len();
    (0..b).flat_map(|bi| order.iter().map(move |&i| bi * n + i)).collect()
}

/// Assembles per-window affinities `[n × heads × w²]` into a global
/// `[heads × Hs × Ws]` map.
pub fn stitch_affinity(per_window: &Tensor<f32>, grid: (usize, usize), w: usize) -> Result<Tensor<f32>> {
    let s = per_window.shape();
    let (hs, ws) = grid;
    if s.len() != 3 || s[2] != w * w || hs % w != 0 || ws % w != 0 {
        return Err(Error::shape("stitch_affinity", s, &[hs, ws, w]));
    }
    let (n, heads) = (s[0], s[1]);
    if n != (hs / w) * (ws / w) {
        return Err(Error::Contract(format!(
            "stitch_affinity: {n} windows cannot tile a {hs}x{ws} grid with window {w}"
        )));
    }
    let order = window_order(hs, ws, w);
    let d = per_window.data();
    let ww = w * w;
    let mut out = vec![0.0; heads * hs * ws];
    for win in 0..n {
        for h in 0..heads {
            for i in 0..ww {
                out[h * hs * ws + order[win * ww + i]] = d[(win * heads + h) * ww + i];
            }
        }
    }
    Tensor::new(&[heads, hs, ws], out)
}

/// Splits a `[heads × Hs × Ws]` map back into `[n × heads × w²]` windows.
pub fn unstitch_affinity(global: &Tensor<f32>, w: usize) -> Result<Tensor<f32>> {
    let s = global.shape();
    if s.len() != 3 || !s[1].is_multiple_of(w) || !s[2].is_multiple_of(w) {
        return Err(Error::shape("unstitch_affinity", s, &[w]));
    }
    let (heads, hs, ws) = (s[0], s[1], s[2]);
    let n = (hs / w) * (ws / w);
    let order = window_order(hs, ws, w);
    let d = global.data();
    let ww = w * w;
    let mut out = vec![0.0; n * heads * ww];
    for win in 0..n {
        for h in 0..heads {
            for i in 0..ww {
                out[(win * heads + h) * ww + i] = d[h * hs * ws + order[win * ww + i]];
            }
        }
    }
    Tensor::new(&[n, heads, ww], out)
}

/// Additive attention mask over a `[w² patches ; T prompts]` sequence.
///
/// Patch queries see only patch keys and prompt queries see the patches and
/// their own task's prompt, so nothing flows from a prompt into the patch
/// tokens or into another task's prompt.
pub fn attention_mask(patches: usize, prompts: usize) -> Vec<f64> {
    const BLOCKED: f64 = -1e9;
    let l = patches + prompts;
    let mut m = vec![0.0; l * l];
    for q in 0..l {
        for k in patches..l {
            if q < patches || q != k {
                m[q * l + k] = BLOCKED;
            }
        }
    }
    m
}
