
use super::{Graph, Var};
use crate::par;
use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Padding that keeps the spatial size for stride 1.
    pub const fn same(kernel: usize) -> Self {
        Self { stride: 1, pad: kernel / 2 }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox·s − p + kx` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.pad);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the `[patch, positions]` column block of one sample.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let pos = self.positions();
        let (s, p) = (self.spec.stride, self.spec.pad);
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[r * pos..(r + 1) * pos];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= self.h || lo >= hi {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        if s == 1 {
                            let start = lo + kx - p;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[ox * s + kx - p];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Scatter-adds a `[patch, positions]` column block back onto one sample.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let pos = self.positions();
        let (s, p) = (self.spec.stride, self.spec.pad);
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[r * pos..(r + 1) * pos];
                    let (lo, hi) = self.valid_cols(kx);
                    r += 1;
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= self.h {
                            continue;
                        }
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if s == 1 {
                            let start = lo + kx - p;
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox * s + kx - p] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws[1], xs[1], "conv2d channel mismatch: weight {ws:?}, input {xs:?}");
        let (n, cout) = (xs[0], ws[0]);
        let geo = Geometry {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ho: spec.out_size(xs[2], ws[2]),
            wo: spec.out_size(xs[3], ws[3]),
            spec,
        };
        let (patch, pos) = (geo.patch(), geo.positions());
        let in_len = geo.cin * geo.h * geo.w;

        let out_len = cout * pos;
        let mut out = vec![0.0; n * out_len];
        {
            let (xdata, wdata) = (xv.data(), wv.data());
            par::for_each_chunk_mut(&mut out, out_len, |i, dst| {
                let mut cols = vec![0.0; patch * pos];
                geo.im2col(&xdata[i * in_len..(i + 1) * in_len], &mut cols);
                gemm(cout, patch, pos, wdata, &cols, dst, false)
            });
        }
        let out_shape = [n, cout, geo.ho, geo.wo];
        self.custom_op(Tensor::new(&out_shape, out), &[x, w], move |g, need| {
            let (gdata, xdata, wdata) = (g.data(), xv.data(), wv.data());
            let gw = need[1].then(|| {
                let mut d = vec![0.0; cout * patch];
                let mut cols = vec![0.0; patch * pos];
                for i in 0..n {
                    geo.im2col(&xdata[i * in_len..(i + 1) * in_len], &mut cols);
                    gemm_bt(cout, pos, patch, &gdata[i * out_len..(i + 1) * out_len], &cols, &mut d, i > 0);
                }
                Tensor::new(&ws, d)
            });
            let gx = need[0].then(|| {
                let mut dx = vec![0.0; n * in_len];
                par::for_each_chunk_mut(&mut dx, in_len, |i, block| {
                    let mut dcols = vec![0.0; patch * pos];
                    gemm_at(patch, cout, pos, wdata, &gdata[i * out_len..(i + 1) * out_len], &mut dcols, false);
                    geo.col2im(&dcols, block)
                });
                Tensor::new(&xs, dx)
            });
            vec![gx, gw]
        })
    }

    /// Per-channel convolution of `x: [N, C, H, W]` with `w: [C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, spec: Conv2dSpec) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(ws[0], xs[1], "depthwise channel mismatch");
        assert_eq!(ws[1], 1, "depthwise weight must be [C, 1, kh, kw]");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        let (ho, wo) = (spec.out_size(h, kh), spec.out_size(wd, kw));
        let (s, p) = (spec.stride as isize, spec.pad as isize);
        let at = move |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let iy = oy as isize * s - p + ky as isize;
            let ix = ox as isize * s - p + kx as isize;
            (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd).then(|| iy as usize * wd + ix as usize)
        };
        let mut out = vec![0.0; n * c * ho * wo];
        let (xdata, wdata) = (xv.data(), wv.data());
        par::for_each_chunk_mut(&mut out, ho * wo, |plane, dst| {
            let ch = plane % c;
            let src = &xdata[plane * h * wd..(plane + 1) * h * wd];
            let k = &wdata[ch * kh * kw..(ch + 1) * kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            if let Some(i) = at(oy, ox, ky, kx) {
                                acc += src[i] * k[ky * kw + kx];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        });
        self.custom_op(Tensor::new(&[n, c, ho, wo], out), &[x, w], move |g, need| {
            let gx = need[0].then(|| {
                let mut dx = vec![0.0; n * c * h * wd];
                let (gdata, wdata) = (g.data(), wv.data());
                par::for_each_chunk_mut(&mut dx, h * wd, |plane, dst| {
                    let ch = plane % c;
                    let gsrc = &gdata[plane * ho * wo..(plane + 1) * ho * wo];
                    let k = &wdata[ch * kh * kw..(ch + 1) * kh * kw];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gsrc[oy * wo + ox];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    if let Some(i) = at(oy, ox, ky, kx) {
                                        dst[i] += gv * k[ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                });
                Tensor::new(&xs, dx)
            });
            let gw = need[1].then(|| {
                let mut dw = vec![0.0; c * kh * kw];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let src = &xv.data()[plane * h * wd..(plane + 1) * h * wd];
                    let gsrc = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let k = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gsrc[oy * wo + ox];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    if let Some(i) = at(oy, ox, ky, kx) {
                                        k[ky * kw + kx] += gv * src[i];
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(&ws, dw)
            });
            vec![gx, gw]
        })
    }
}
