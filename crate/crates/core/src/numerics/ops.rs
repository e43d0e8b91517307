use super::graph::{Graph, Op, Var};
use super::tensor::{permute_data, strides};
use super::Real;
use crate::error::{Error, Result};

/// Per-channel batch statistics from a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (what the normalization used).
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape `inp`
/// broadcast against it.
pub(crate) fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let m: usize = inp.iter().product();
    if out == inp {
        return (0..n).collect();
    }
    // trailing-suffix broadcast, e.g. a bias row
    if inp.len() <= out.len() && inp == &out[out.len() - inp.len()..] {
        return (0..n).map(|i| i % m.max(1)).collect();
    }
    let rank = out.len();
    let in_str = strides(inp);
    let mut eff = vec![0usize; rank];
    for i in 0..inp.len() {
        let ax = rank - inp.len() + i;
        eff[ax] = if inp[i] == 1 { 0 } else { in_str[i] };
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `(outer, n, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source taps for align_corners=false bilinear resampling along one axis.
pub(crate) fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

pub(crate) fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss of one logit against a target in {0, 1}, and its
/// derivative with respect to the logit.
pub(crate) fn focal_parts(x: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_1mp = -softplus(x);
    let pos = -alpha * (1.0 - p).powf(gamma) * log_p;
    let neg = -(1.0 - alpha) * p.powf(gamma) * log_1mp;
    let dpos = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
    let dneg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_1mp);
    (y * pos + (1.0 - y) * neg, y * dpos + (1.0 - y) * dneg)
}

pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let hw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let hw = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push_op(&shape, data, &[x], op)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let data: Vec<T>;
        let out;
        if sa == sb {
            out = sa;
            data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        } else {
            out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
            let ma = broadcast_map(&out, &sa);
            let mb = broadcast_map(&out, &sb);
            let (da, db) = (self.data(a), self.data(b));
            data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        }
        Ok(self.push_op(&out, data, &[a, b], op))
    }

    /// Matrix product of `[M×K]·[K×N]`, or batched `[B×M×K]·[B×K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` with `b` stored as `[N×K]` (or `[B×N×K]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != k2 {
                    return Err(err());
                }
                (1, sa[0], sa[1], n)
            }
            (3, 3) => {
                let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != k2 {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], n)
            }
            _ => return Err(err()),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    false,
                    &db[bi * k * n..(bi + 1) * k * n],
                    trans_b,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push_op(&shape, out, &[a, b], Op::MatMul { a, b, trans_b }))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map_unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| T::of(gelu_parts(v.f64()).0), Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| T::of(sigmoid(v.f64())), Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Elementwise smooth L1: `0.5x²/β` inside `|x|<β`, `|x|-0.5β` outside.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let b = T::of(beta);
        let half = T::of(0.5);
        self.map_unary(
            x,
            |v| {
                if v.abs() < b {
                    half * v * v / b
                } else {
                    v.abs() - half * b
                }
            },
            Op::SmoothL1 { x, beta: b },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push_op(&[1], vec![s], &[x], Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape.clone();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
            if oshape.is_empty() {
                oshape.push(1);
            }
        }
        Ok(self.push_op(&oshape, out, &[x], Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push_op(&shape, out, &[x], Op::Softmax(x))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let d = self.data(x);
        let rows = d.len() / c.max(1);
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); d.len()];
        let inv_c = T::of(1.0 / c as f64);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push_op(
            &shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", s, self.shape(gamma)));
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Train-mode batch norm over `[B×C×H×W]` using batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnBatchStats)> {
        let (b, c, hw) = self.bn_check(x, gamma, beta)?;
        let count = b * hw;
        if count < 2 {
            return Err(Error::DegenerateStats(count));
        }
        let d = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); c];
        for ch in 0..c {
            let planes = (0..b).map(|bi| &d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]);
            let m = planes.clone().flatten().map(|v| v.f64()).sum::<f64>() / count as f64;
            let v = planes.flatten().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / count as f64;
            mean[ch] = m;
            var[ch] = v;
            let rs = 1.0 / (v + eps).sqrt();
            rstd[ch] = T::of(rs);
            let (mt, rst) = (T::of(m), T::of(rs));
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (d[i] - mt) * rst;
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push_op(
            &shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train: true,
            },
        );
        Ok((v, BnBatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, hw) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", &[c], &[running_mean.len()]));
        }
        let d = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        let rstd: Vec<T> = running_var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let m = T::of(running_mean[ch]);
                for i in off..off + hw {
                    let xh = (d[i] - m) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(
            &shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train: false,
            },
        ))
    }

    /// Cross-correlation of `[B×C×H×W]` with `[O×C×k×k]` (odd `k`).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Config(format!(
                "conv2d: kernel {k} does not fit input {h}x{wd} with padding {pad}"
            )));
        }
        if !(h + 2 * pad - k).is_multiple_of(stride) || !(wd + 2 * pad - k).is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "conv2d: output size for input {h}x{wd}, kernel {k}, stride {stride}, padding {pad} is not integral"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(bv), &[o]));
            }
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = oh * ow;
        let mut cols = vec![T::zero(); b * ckk * hw];
        let mut out = vec![T::zero(); b * o * hw];
        {
            let (dx, dw) = (self.data(x), self.data(w));
            for bi in 0..b {
                let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                im2col(
                    &dx[bi * c * h * wd..(bi + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    col,
                );
                T::gemm(
                    o,
                    ckk,
                    hw,
                    dw,
                    false,
                    col,
                    false,
                    &mut out[bi * o * hw..(bi + 1) * o * hw],
                    T::zero(),
                );
            }
            if let Some(bv) = bias {
                let db = self.data(bv);
                for bi in 0..b {
                    for oc in 0..o {
                        for v in &mut out[(bi * o + oc) * hw..(bi * o + oc + 1) * hw] {
                            *v += db[oc];
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let keep = inputs.iter().any(|&v| self.requires_grad(v));
        let op = Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
            cols: if keep { cols } else { Vec::new() },
        };
        Ok(self.push_op(&[b, o, oh, ow], out, &inputs, op))
    }

    /// Bilinear resampling of the last two axes (align_corners = false).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("upsample_bilinear", &s, &[out_h, out_w]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let d = self.data(x);
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                    dst[oy * out_w + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let mut oshape = s.clone();
        let r = oshape.len();
        oshape[r - 2] = out_h;
        oshape[r - 1] = out_w;
        Ok(self.push_op(&oshape, out, &[x], Op::Upsample { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() {
            return Err(Error::shape("reshape", s, shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape, data, &[x], Op::Reshape(x)))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (shape, data) = permute_data(self.shape(x), self.data(x), axes)?;
        Ok(self.push_op(&shape, data, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Gathers slices along `axis`; repeated indices are allowed and their
    /// gradients are summed.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index.iter().any(|&i| i >= s[axis]) {
            return Err(Error::shape("index_select", &s, &[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                out.extend_from_slice(&d[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut oshape = s.clone();
        oshape[axis] = index.len();
        Ok(self.push_op(
            &oshape,
            out,
            &[x],
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        Ok(self.push_op(&oshape, out, xs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Per-row softmax cross-entropy of `[N×K]` logits. Rows labelled `None`
    /// are ignored and contribute 0. Returns the `[N]` per-row losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if labels.iter().flatten().any(|&l| l >= k) {
            return Err(Error::Contract(format!("label out of range for {k} classes")));
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); s[0]];
        for (r, label) in labels.iter().enumerate() {
            let row = &d[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / z;
            }
            if let Some(l) = label {
                out[r] = z.ln() + m - row[*l];
            }
        }
        Ok(self.push_op(
            &[s[0]],
            out,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Elementwise binary cross-entropy between `sigmoid(x)` and soft targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.value(x).numel() != target.len() {
            return Err(Error::shape("bce_with_logits", self.shape(x), &[target.len()]));
        }
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .zip(target)
            .map(|(&v, &y)| {
                let v = v.f64();
                T::of(softplus(v) - v * y)
            })
            .collect();
        let target = target.iter().map(|&v| T::of(v)).collect();
        Ok(self.push_op(&shape, out, &[x], Op::BceWithLogits { x, target }))
    }

    /// Elementwise sigmoid focal loss on logits against {0,1} targets.
    pub fn sigmoid_focal(&mut self, x: Var, target: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        if self.value(x).numel() != target.len() {
            return Err(Error::shape("sigmoid_focal", self.shape(x), &[target.len()]));
        }
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .zip(target)
            .map(|(&v, &y)| T::of(focal_parts(v.f64(), y, alpha, gamma).0))
            .collect();
        let target = target.iter().map(|&v| T::of(v)).collect();
        Ok(self.push_op(
            &shape,
            out,
            &[x],
            Op::SigmoidFocal {
                x,
                target,
                alpha: T::of(alpha),
                gamma: T::of(gamma),
            },
        ))
    }
}
