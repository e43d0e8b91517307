use super::graph::{Node, Op, Var};
use super::ops::{bilinear_taps, broadcast_map, col2im, focal_parts, gelu_parts, sigmoid, split_axis};
use super::tensor::permute_data;
use super::{Real, Tensor};

/// Runs `f` on the gradient buffer of `v` (allocated on first use) while the
/// rest of the graph stays readable. No-op for nodes that don't require grad.
fn with_grad<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
    if !nodes[v.0].value.requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let mut g = nodes[v.0].value.grad.take().unwrap_or_else(|| vec![T::zero(); n]);
    f(&mut g, nodes);
    nodes[v.0].value.grad = Some(g);
}

fn val<T: Real>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

/// Accumulates `contrib(i)` for every output index into the (possibly
/// broadcast) input gradient.
fn reduce_into<T: Real>(g: &mut [T], out_shape: &[usize], in_shape: &[usize], n: usize, contrib: impl Fn(usize) -> T) {
    if out_shape == in_shape {
        for (i, gi) in g.iter_mut().enumerate().take(n) {
            *gi += contrib(i);
        }
    } else {
        let map = broadcast_map(out_shape, in_shape);
        for (i, &j) in map.iter().enumerate() {
            g[j] += contrib(i);
        }
    }
}

pub(crate) fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, gout: &[T], nodes: &mut [Node<T>]) {
    let oshape = out.shape();
    let n = gout.len();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (a, b, trans_b) = (*a, *b, *trans_b);
            let sa = val(nodes, a).shape().to_vec();
            let (batch, m, k) = if sa.len() == 2 {
                (1, sa[0], sa[1])
            } else {
                (sa[0], sa[1], sa[2])
            };
            let nn = *oshape.last().unwrap();
            with_grad(nodes, a, |ga, nodes| {
                let db = val(nodes, b).data();
                for bi in 0..batch {
                    let go = &gout[bi * m * nn..(bi + 1) * m * nn];
                    let bb = &db[bi * k * nn..(bi + 1) * k * nn];
                    // dA = dC·Bᵀ (or dC·B when B was used transposed)
                    T::gemm(
                        m,
                        nn,
                        k,
                        go,
                        false,
                        bb,
                        !trans_b,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        T::one(),
                    );
                }
            });
            with_grad(nodes, b, |gb, nodes| {
                let da = val(nodes, a).data();
                for bi in 0..batch {
                    let go = &gout[bi * m * nn..(bi + 1) * m * nn];
                    let aa = &da[bi * m * k..(bi + 1) * m * k];
                    let dst = &mut gb[bi * k * nn..(bi + 1) * k * nn];
                    if trans_b {
                        // dB = dCᵀ·A
                        T::gemm(nn, m, k, go, true, aa, false, dst, T::one());
                    } else {
                        // dB = Aᵀ·dC
                        T::gemm(k, m, nn, aa, true, go, false, dst, T::one());
                    }
                }
            });
        }
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            let sa = val(nodes, a).shape().to_vec();
            let sb = val(nodes, b).shape().to_vec();
            with_grad(nodes, a, |g, _| reduce_into(g, oshape, &sa, n, |i| gout[i]));
            with_grad(nodes, b, |g, _| reduce_into(g, oshape, &sb, n, |i| gout[i]));
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let sa = val(nodes, a).shape().to_vec();
            let sb = val(nodes, b).shape().to_vec();
            with_grad(nodes, a, |g, _| reduce_into(g, oshape, &sa, n, |i| gout[i]));
            with_grad(nodes, b, |g, _| reduce_into(g, oshape, &sb, n, |i| -gout[i]));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let sa = val(nodes, a).shape().to_vec();
            let sb = val(nodes, b).shape().to_vec();
            with_grad(nodes, a, |g, nodes| {
                let db = val(nodes, b).data();
                let mb = broadcast_map(oshape, &sb);
                reduce_into(g, oshape, &sa, n, |i| gout[i] * db[mb[i]]);
            });
            with_grad(nodes, b, |g, nodes| {
                let da = val(nodes, a).data();
                let ma = broadcast_map(oshape, &sa);
                reduce_into(g, oshape, &sb, n, |i| gout[i] * da[ma[i]]);
            });
        }
        Op::Div(a, b) => {
            let (a, b) = (*a, *b);
            let sa = val(nodes, a).shape().to_vec();
            let sb = val(nodes, b).shape().to_vec();
            with_grad(nodes, a, |g, nodes| {
                let db = val(nodes, b).data();
                let mb = broadcast_map(oshape, &sb);
                reduce_into(g, oshape, &sa, n, |i| gout[i] / db[mb[i]]);
            });
            with_grad(nodes, b, |g, nodes| {
                let (da, db) = (val(nodes, a).data(), val(nodes, b).data());
                let ma = broadcast_map(oshape, &sa);
                let mb = broadcast_map(oshape, &sb);
                reduce_into(g, oshape, &sb, n, |i| {
                    let bv = db[mb[i]];
                    -gout[i] * da[ma[i]] / (bv * bv)
                });
            });
        }
        Op::Scale(x, c) => with_grad(nodes, *x, |g, _| {
            for (gi, &go) in g.iter_mut().zip(gout) {
                *gi += go * *c;
            }
        }),
        Op::AddScalar(x) | Op::Reshape(x) => with_grad(nodes, *x, |g, _| {
            for (gi, &go) in g.iter_mut().zip(gout) {
                *gi += go;
            }
        }),
        Op::Relu(x) => with_grad(nodes, *x, |g, _| {
            for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(out.data()) {
                if y > T::zero() {
                    *gi += go;
                }
            }
        }),
        Op::Gelu(x) => with_grad(nodes, *x, |g, nodes| {
            for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(val(nodes, *x).data()) {
                *gi += go * T::of(gelu_parts(xv.f64()).1);
            }
        }),
        Op::Exp(x) => with_grad(nodes, *x, |g, _| {
            for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(out.data()) {
                *gi += go * y;
            }
        }),
        Op::Log(x) => with_grad(nodes, *x, |g, nodes| {
            for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(val(nodes, *x).data()) {
                *gi += go / xv;
            }
        }),
        Op::Sigmoid(x) => with_grad(nodes, *x, |g, _| {
            for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(out.data()) {
                *gi += go * y * (T::one() - y);
            }
        }),
        Op::Abs(x) => with_grad(nodes, *x, |g, nodes| {
            for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(val(nodes, *x).data()) {
                if xv > T::zero() {
                    *gi += go;
                } else if xv < T::zero() {
                    *gi -= go;
                }
            }
        }),
        Op::SmoothL1 { x, beta } => with_grad(nodes, *x, |g, nodes| {
            for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(val(nodes, *x).data()) {
                let d = if xv.abs() < *beta {
                    xv / *beta
                } else if xv > T::zero() {
                    T::one()
                } else {
                    -T::one()
                };
                *gi += go * d;
            }
        }),
        Op::SumAll(x) => with_grad(nodes, *x, |g, _| {
            for gi in g.iter_mut() {
                *gi += gout[0];
            }
        }),
        Op::SumAxis { x, axis } => {
            let s = val(nodes, *x).shape().to_vec();
            let (outer, len, inner) = split_axis(&s, *axis);
            with_grad(nodes, *x, |g, _| {
                for o in 0..outer {
                    for i in 0..len {
                        let dst = &mut g[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &go) in dst.iter_mut().zip(&gout[o * inner..(o + 1) * inner]) {
                            *d += go;
                        }
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let c = *oshape.last().unwrap();
            with_grad(nodes, *x, |g, _| {
                for ((gr, gor), yr) in g.chunks_mut(c).zip(gout.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: T = gor.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gr[j] += yr[j] * (gor[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *oshape.last().unwrap();
            with_grad(nodes, *gamma, |g, _| {
                for (gor, xr) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        g[j] += gor[j] * xr[j];
                    }
                }
            });
            with_grad(nodes, *beta, |g, _| {
                for gor in gout.chunks(c) {
                    for j in 0..c {
                        g[j] += gor[j];
                    }
                }
            });
            with_grad(nodes, *x, |g, nodes| {
                let gm = val(nodes, *gamma).data();
                let inv_c = T::of(1.0 / c as f64);
                let mut dxh = vec![T::zero(); c];
                for (r, ((gr, gor), xr)) in g.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        dxh[j] = gor[j] * gm[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xr[j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        gr[j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                    }
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            train,
        } => {
            let (b, c, hw) = (oshape[0], oshape[1], oshape[2] * oshape[3]);
            let plane = |bi: usize, ch: usize| (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
            with_grad(nodes, *gamma, |g, _| {
                for bi in 0..b {
                    for (ch, gc) in g.iter_mut().enumerate() {
                        let r = plane(bi, ch);
                        *gc += gout[r.clone()].iter().zip(&xhat[r]).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            });
            with_grad(nodes, *beta, |g, _| {
                for bi in 0..b {
                    for (ch, gc) in g.iter_mut().enumerate() {
                        *gc += gout[plane(bi, ch)].iter().copied().sum::<T>();
                    }
                }
            });
            with_grad(nodes, *x, |g, nodes| {
                let gm = val(nodes, *gamma).data();
                for ch in 0..c {
                    let scale = gm[ch] * rstd[ch];
                    if *train {
                        let count = T::of((b * hw) as f64);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for bi in 0..b {
                            for i in plane(bi, ch) {
                                m1 += gout[i];
                                m2 += gout[i] * xhat[i];
                            }
                        }
                        m1 /= count;
                        m2 /= count;
                        for bi in 0..b {
                            for i in plane(bi, ch) {
                                g[i] += scale * (gout[i] - m1 - xhat[i] * m2);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for i in plane(bi, ch) {
                                g[i] += scale * gout[i];
                            }
                        }
                    }
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
            cols,
        } => {
            let sx = val(nodes, *x).shape().to_vec();
            let sw = val(nodes, *w).shape().to_vec();
            let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, k) = (sw[0], sw[2]);
            let (oh, ow) = (oshape[2], oshape[3]);
            let (ckk, hw) = (c * k * k, oh * ow);
            if let Some(bv) = bias {
                with_grad(nodes, *bv, |g, _| {
                    for bi in 0..b {
                        for (oc, gc) in g.iter_mut().enumerate() {
                            *gc += gout[(bi * o + oc) * hw..(bi * o + oc + 1) * hw]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                });
            }
            with_grad(nodes, *w, |g, _| {
                for bi in 0..b {
                    let go = &gout[bi * o * hw..(bi + 1) * o * hw];
                    let col = &cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                    T::gemm(o, hw, ckk, go, false, col, true, g, T::one());
                }
            });
            with_grad(nodes, *x, |g, nodes| {
                let dw = val(nodes, *w).data();
                let mut dcol = vec![T::zero(); ckk * hw];
                for bi in 0..b {
                    let go = &gout[bi * o * hw..(bi + 1) * o * hw];
                    T::gemm(ckk, o, hw, dw, true, go, false, &mut dcol, T::zero());
                    col2im(
                        &dcol,
                        c,
                        h,
                        wd,
                        k,
                        *stride,
                        *pad,
                        oh,
                        ow,
                        &mut g[bi * c * h * wd..(bi + 1) * c * h * wd],
                    );
                }
            });
        }
        Op::Upsample { x } => {
            let s = val(nodes, *x).shape().to_vec();
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let (oh, ow) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
            let planes = n / (oh * ow);
            let ty = bilinear_taps(h, oh);
            let tx = bilinear_taps(w, ow);
            with_grad(nodes, *x, |g, _| {
                for p in 0..planes {
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    let src = &gout[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                            let go = src[oy * ow + ox];
                            dst[y0 * w + x0] += go * hy * hx;
                            dst[y0 * w + x1] += go * hy * lx;
                            dst[y1 * w + x0] += go * ly * hx;
                            dst[y1 * w + x1] += go * ly * lx;
                        }
                    }
                }
            });
        }
        Op::Permute { x, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let (_, back) = permute_data(oshape, gout, &inv).expect("valid inverse permutation");
            with_grad(nodes, *x, |g, _| {
                for (gi, b) in g.iter_mut().zip(back) {
                    *gi += b;
                }
            });
        }
        Op::IndexSelect { x, axis, index } => {
            let s = val(nodes, *x).shape().to_vec();
            let (outer, len, inner) = split_axis(&s, *axis);
            with_grad(nodes, *x, |g, _| {
                for o in 0..outer {
                    for (j, &i) in index.iter().enumerate() {
                        let src = &gout[(o * index.len() + j) * inner..(o * index.len() + j + 1) * inner];
                        let dst = &mut g[(o * len + i) * inner..(o * len + i + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            });
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(oshape, *axis);
            let mut offset = 0;
            for &v in xs {
                let len = val(nodes, v).shape()[*axis];
                with_grad(nodes, v, |g, _| {
                    for o in 0..outer {
                        let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &s) in g[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let k = val(nodes, *logits).shape()[1];
            with_grad(nodes, *logits, |g, _| {
                for (r, label) in labels.iter().enumerate() {
                    let Some(l) = label else { continue };
                    for j in 0..k {
                        let onehot = if j == *l { T::one() } else { T::zero() };
                        g[r * k + j] += gout[r] * (probs[r * k + j] - onehot);
                    }
                }
            });
        }
        Op::BceWithLogits { x, target } => with_grad(nodes, *x, |g, nodes| {
            for (i, &xv) in val(nodes, *x).data().iter().enumerate() {
                g[i] += gout[i] * (T::of(sigmoid(xv.f64())) - target[i]);
            }
        }),
        Op::SigmoidFocal {
            x,
            target,
            alpha,
            gamma,
        } => with_grad(nodes, *x, |g, nodes| {
            for (i, &xv) in val(nodes, *x).data().iter().enumerate() {
                let d = focal_parts(xv.f64(), target[i].f64(), alpha.f64(), gamma.f64()).1;
                g[i] += gout[i] * T::of(d);
            }
        }),
    }
}
