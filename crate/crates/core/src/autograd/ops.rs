use std::rc::Rc;

use super::{Graph, Var};
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

fn split_nc(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let rest = shape.iter().skip(2).product::<usize>();
    (n, c, rest)
}

impl Graph {
    fn unary<F, D>(&self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let xv = self.value(x);
        let y = Rc::new(xv.map(f));
        let yc = Rc::clone(&y);
        self.custom_op_rc(y, &[x], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.custom_op(y, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.custom_op(y, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let y = av.zip_map(&bv, |x, y| x * y);
        self.custom_op(y, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |g, b| g * b)),
                need[1].then(|| g.zip_map(&av, |g, a| g * a)),
            ]
        })
    }

    pub fn mul_scalar(&self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.custom_op(y, &[x], move |g, _| vec![Some(g.map(|v| v * k))])
    }

    pub fn add_scalar(&self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v + k);
        self.custom_op(y, &[x], |g, _| vec![Some(g.clone())])
    }

    /// `x · s` where `s` is a one-element tensor.
    pub fn mul_by_scalar_var(&self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let k = sv.item();
        let y = xv.map(|v| v * k);
        self.custom_op(y, &[x, s], move |g, need| {
            vec![
                need[0].then(|| g.map(|v| v * k)),
                need[1].then(|| {
                    let d: f64 = g.data().iter().zip(xv.data()).map(|(g, x)| g * x).sum();
                    Tensor::new(sv.shape(), vec![d])
                }),
            ]
        })
    }

    pub fn leaky_relu(&self, x: Var, slope: f64, gain: f64) -> Var {
        self.unary(
            x,
            move |v| gain * if v > 0.0 { v } else { slope * v },
            move |x, _| gain * if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0, 1.0)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// `(x + eps)^(-1/2)`.
    pub fn rsqrt(&self, x: Var, eps: f64) -> Var {
        self.unary(x, move |v| 1.0 / (v + eps).sqrt(), |_, y| -0.5 * y * y * y)
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.custom_op(Tensor::scalar(xv.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let y = (*xv).clone().reshape(shape);
        self.custom_op(y, &[x], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [N, C, ...]`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (n, c, rest) = split_nc(xv.shape());
        assert_eq!(bv.len(), c, "bias length");
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(rest).enumerate() {
            let bias = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let bshape = bv.shape().to_vec();
        self.custom_op(y, &[x, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for (i, chunk) in g.data().chunks(rest).enumerate() {
                    acc[i % c] += chunk.iter().sum::<f64>();
                }
                let _ = n;
                Tensor::new(&bshape, acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Scales channel `c` of sample `n` of `x: [N, C, ...]` by `s[n, c]`.
    pub fn mul_channel(&self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let (n, c, rest) = split_nc(xv.shape());
        assert_eq!(sv.shape(), &[n, c], "mul_channel scale shape");
        let mut y = (*xv).clone();
        for (i, chunk) in y.data_mut().chunks_mut(rest).enumerate() {
            let k = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.custom_op(y, &[x, s], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(rest).enumerate() {
                    let k = sv.data()[i];
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                gx
            });
            let gs = need[1].then(|| {
                let d = g
                    .data()
                    .chunks(rest)
                    .zip(xv.data().chunks(rest))
                    .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(&[n, c], d)
            });
            vec![gx, gs]
        })
    }

    /// `x: [N, C, H, W] + y: [N, 1, H, W]` broadcast over channels.
    pub fn add_across_channels(&self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        let (n, c, rest) = split_nc(xv.shape());
        assert_eq!(yv.len(), n * rest, "add_across_channels shape");
        let mut out = (*xv).clone();
        for (i, chunk) in out.data_mut().chunks_mut(rest).enumerate() {
            let src = &yv.data()[(i / c) * rest..(i / c + 1) * rest];
            chunk.iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let yshape = yv.shape().to_vec();
        self.custom_op(out, &[x, y], move |g, need| {
            let gy = need[1].then(|| {
                let mut acc = vec![0.0; n * rest];
                for (i, chunk) in g.data().chunks(rest).enumerate() {
                    let dst = &mut acc[(i / c) * rest..(i / c + 1) * rest];
                    dst.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                }
                Tensor::new(&yshape, acc)
            });
            vec![Some(g.clone()), gy]
        })
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_batch(&self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(n * xv.len());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let xshape = xv.shape().to_vec();
        let len = xv.len();
        self.custom_op(Tensor::new(&shape, data), &[x], move |g, _| {
            let mut acc = vec![0.0; len];
            for chunk in g.data().chunks(len) {
                acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(Tensor::new(&xshape, acc))]
        })
    }

    /// `a: [M, K] · b: [K, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.dim(0), av.dim(1));
        assert_eq!(bv.dim(0), k, "matmul inner dims");
        let n = bv.dim(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), bv.data(), &mut out, false);
        self.custom_op(Tensor::new(&[m, n], out), &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm_bt(m, n, k, g.data(), bv.data(), &mut d, false);
                Tensor::new(&[m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm_at(k, m, n, av.data(), g.data(), &mut d, false);
                Tensor::new(&[k, n], d)
            });
            vec![ga, gb]
        })
    }

    /// `a: [M, K] · b: [N, K]ᵀ`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.dim(0), av.dim(1));
        assert_eq!(bv.dim(1), k, "matmul_bt inner dims");
        let n = bv.dim(0);
        let mut out = vec![0.0; m * n];
        gemm_bt(m, k, n, av.data(), bv.data(), &mut out, false);
        self.custom_op(Tensor::new(&[m, n], out), &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g.data(), bv.data(), &mut d, false);
                Tensor::new(&[m, k], d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![0.0; n * k];
                gemm_at(n, m, k, g.data(), av.data(), &mut d, false);
                Tensor::new(&[n, k], d)
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.dim(0), xv.dim(1));
        let t = |src: &[f64], r: usize, c: usize| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            out
        };
        let y = Tensor::new(&[c, r], t(xv.data(), r, c));
        self.custom_op(y, &[x], move |g, _| vec![Some(Tensor::new(&[r, c], t(g.data(), c, r)))])
    }

    /// Sums over the last axis.
    pub fn sum_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let l = *shape.last().expect("non-empty shape");
        let out: Vec<f64> = xv.data().chunks(l).map(|c| c.iter().sum()).collect();
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        self.custom_op(Tensor::new(&oshape, out), &[x], move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v).take(l)).collect();
            vec![Some(Tensor::new(&shape, data))]
        })
    }

    /// Concatenates `[N, A]` and `[N, B]` into `[N, A + B]`.
    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.dim(0);
        assert_eq!(bv.dim(0), n);
        let (wa, wb) = (av.len() / n, bv.len() / n);
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        self.custom_op(Tensor::new(&[n, wa + wb], data), &[a, b], move |g, _| {
            let mut ga = Vec::with_capacity(n * wa);
            let mut gb = Vec::with_capacity(n * wb);
            for row in g.data().chunks(wa + wb) {
                ga.extend_from_slice(&row[..wa]);
                gb.extend_from_slice(&row[wa..]);
            }
            vec![Some(Tensor::new(&sa, ga)), Some(Tensor::new(&sb, gb))]
        })
    }

    /// Gathers leading-axis entries of `x` by index (repeats allowed).
    pub fn select_rows(&self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let stride = xv.len() / xv.dim(0);
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let xshape = xv.shape().to_vec();
        let idx = idx.to_vec();
        self.custom_op(Tensor::new(&shape, data), &[x], move |g, _| {
            let mut acc = Tensor::zeros(&xshape);
            for (k, &i) in idx.iter().enumerate() {
                let src = &g.data()[k * stride..(k + 1) * stride];
                acc.data_mut()[i * stride..(i + 1) * stride]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(acc)]
        })
    }

    /// Divides each row of `x: [N, D]` by its L2 norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let d = xv.len() / n;
        let norms: Vec<f64> = (0..n).map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect();
        let mut y = (*xv).clone();
        for (row, norm) in y.data_mut().chunks_mut(d).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        self.custom_op_rc(y, &[x], move |g, _| {
            let mut out = g.clone();
            for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
                let yr = yc.row(i);
                let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (o, y) in row.iter_mut().zip(yr) {
                    *o = (*o - y * dot) / norms[i];
                }
            }
            vec![Some(out)]
        })
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, rest) = split_nc(xv.shape());
        let out = xv.data().chunks(rest).map(|ch| ch.iter().sum::<f64>() / rest as f64).collect();
        let shape = xv.shape().to_vec();
        self.custom_op(Tensor::new(&[n, c], out), &[x], move |g, _| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat(v / rest as f64).take(rest)).collect();
            vec![Some(Tensor::new(&shape, data))]
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        self.custom_op(Tensor::new(&[n, c, ho, wo], out), &[x], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        let v = 0.25 * src[y * wo + x];
                        let i = 2 * y * w + 2 * x;
                        dst[i] += v;
                        dst[i + 1] += v;
                        dst[i + w] += v;
                        dst[i + w + 1] += v;
                    }
                }
            }
            vec![Some(Tensor::new(&s, gx))]
        })
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool(&self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * c * ho * wo];
        let mut arg = vec![0usize; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = best;
                    arg[o] = p * h * w + best_i;
                }
            }
        }
        self.custom_op(Tensor::new(&[n, c, ho, wo], out), &[x], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for (o, &i) in arg.iter().enumerate() {
                gx[i] += g.data()[o];
            }
            vec![Some(Tensor::new(&s, gx))]
        })
    }

    /// Bilinear 2× upsampling (half-pixel centers, edge clamped).
    pub fn upsample2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let ty = crate::appearance::bilinear_taps(h, ho);
        let tx = crate::appearance::bilinear_taps(w, wo);
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.custom_op(Tensor::new(&[n, c, ho, wo], out), &[x], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v = src[oy * wo + ox];
                        dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                        dst[y1 * w + x0] += v * fy * (1.0 - fx);
                        dst[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
            vec![Some(Tensor::new(&s, gx))]
        })
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(labels.len(), n);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += -(row[labels[i]] - max - z.ln());
        }
        let labels = labels.to_vec();
        self.custom_op(Tensor::scalar(loss / n as f64), &[logits], move |g, _| {
            let scale = g.item() / n as f64;
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(&[n, k], d))]
        })
    }

    /// Pairwise mean squared difference between rows of `x: [N, P]`,
    /// giving an `[N, N]` matrix with an exact zero diagonal.
    pub fn pairwise_mse(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let p = xv.len() / n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = mse(xv.row(i), xv.row(j));
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let shape = xv.shape().to_vec();
        self.custom_op(Tensor::new(&[n, n], out), &[x], move |g, _| {
            let mut gx = vec![0.0; n * p];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = 2.0 * (g.data()[i * n + j] + g.data()[j * n + i]) / p as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let (ri, rj) = (xv.row(i), xv.row(j));
                    for t in 0..p {
                        gx[i * p + t] += w * (ri[t] - rj[t]);
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand_tensor(&[2, 3, 2, 2], 1);
        let b = rand_tensor(&[2, 3, 2, 2], 2);
        let err = max_rel_error(&[a, b], |g, v| {
            let x = g.mul(v[0], v[1]);
            let x = g.leaky_relu(x, 0.2, 1.4);
            let y = g.sigmoid(v[1]);
            let z = g.softplus(g.sub(x, y));
            let z = g.add(z, g.square(v[0]));
            g.sum(g.rsqrt(g.add_scalar(g.square(z), 0.1), 1e-8))
        }, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn broadcast_gradients() {
        let x = rand_tensor(&[2, 3, 2, 2], 3);
        let b = rand_tensor(&[3], 4);
        let s = rand_tensor(&[2, 3], 5);
        let y = rand_tensor(&[2, 1, 2, 2], 6);
        let c = rand_tensor(&[3, 2, 2], 7);
        let err = max_rel_error(&[x, b, s, y, c], |g, v| {
            let t = g.add_channel_bias(v[0], v[1]);
            let t = g.mul_channel(t, v[2]);
            let t = g.add_across_channels(t, v[3]);
            let t = g.add(t, g.broadcast_batch(v[4], 2));
            g.sum(g.square(t))
        }, 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_algebra_gradients() {
        let a = rand_tensor(&[3, 4], 8);
        let b = rand_tensor(&[4, 5], 9);
        let c = rand_tensor(&[2, 5], 10);
        let k = rand_tensor(&[1], 11);
        let err = max_rel_error(&[a, b, c, k], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let abc = g.matmul_bt(ab, v[2]);
            let t = g.transpose(abc);
            let t = g.concat_cols(t, g.select_rows(v[2], &[1, 0]));
            let t = g.l2_normalize_rows(t);
            let t = g.mul_by_scalar_var(t, v[3]);
            let s = g.sum_last(g.square(g.reshape(t, &[2, 2, 4])));
            g.mean(g.square(s))
        }, 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        let x = rand_tensor(&[2, 2, 4, 4], 12);
        let err = max_rel_error(&[x], |g, v| {
            let a = g.avg_pool2(v[0]);
            let u = g.upsample2x(a);
            let m = g.max_pool(u, 3, 2, 1);
            let p = g.global_avg_pool(g.square(m));
            g.sum(g.square(p))
        }, 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn loss_gradients() {
        let logits = rand_tensor(&[3, 4], 13);
        let x = rand_tensor(&[3, 5], 14);
        let err = max_rel_error(&[logits, x], |g, v| {
            let ce = g.cross_entropy(v[0], &[1, 3, 0]);
            let d = g.pairwise_mse(v[1]);
            g.add(ce, g.sum(g.square(d)))
        }, 1e-6);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn upsample_preserves_constants() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 0.7));
        let y = g.value(g.upsample2x(x));
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn frozen_branches_carry_no_closure_but_pass_gradient() {
        let g = Graph::new();
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let x = g.leaf(Tensor::new(&[1, 2], vec![1.0, -1.0]));
        let y = g.sum(g.matmul(x, w));
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
        assert!(grads.get(w).is_none());
    }
}
