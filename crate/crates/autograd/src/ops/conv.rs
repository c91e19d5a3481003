use crate::{Scalar, Tensor, Var};

/// Spatial geometry shared by the convolution kernels.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1, "conv: stride and kernel must be positive");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv: kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` for which `ox*stride - pad + kx` lands inside the row.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        valid_range(self.wo, self.w, self.stride, self.pad, kx)
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        valid_range(self.ho, self.h, self.stride, self.pad, ky)
    }
}

fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    // first o with o*stride + koff >= pad
    let lo = if koff >= pad { 0 } else { (pad - koff).div_ceil(stride) };
    // last o with o*stride + koff - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if koff >= limit {
        0
    } else {
        ((limit - 1 - koff) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let plane_out = g.ho * g.wo;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                let (ox0, ox1) = g.ox_range(kx);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &xc[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        d[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let plane_out = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                let (ox0, ox1) = g.ox_range(kx);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox0..ox1 {
                        drow[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Dense 2-D convolution, `x: [n, c, h, w]`, `weight: [o, c, k, k]`,
    /// no bias (see [`Var::add_channel`]).
    pub fn conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4();
        let (o, c2, k, k2) = wt.dims4();
        assert_eq!(c, c2, "conv2d: input has {c} channels, weight expects {c2}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let g = Geom::new(c, h, w, k, stride, pad);
        let ckk = c * k * k;
        let plane_in = c * h * w;
        let plane_out = g.ho * g.wo;

        let mut out = vec![T::zero(); n * o * plane_out];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane_out] };
        for i in 0..n {
            let xi = &x.data()[i * plane_in..(i + 1) * plane_in];
            let colbuf: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            T::gemm(o, ckk, plane_out, wt.data(), false, colbuf, false, &mut out[i * o * plane_out..(i + 1) * o * plane_out], false);
        }

        self.graph().record(
            Tensor::new(&[n, o, g.ho, g.wo], out),
            &[self, weight],
            Box::new(move |ctx| {
                let (x, wt, gr) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); n * plane_in]);
                let mut gw = ctx.needs[1].then(|| vec![T::zero(); o * ckk]);
                let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { ckk * plane_out }];
                let mut gcols = vec![T::zero(); ckk * plane_out];
                for i in 0..n {
                    let gi = &gr.data()[i * o * plane_out..(i + 1) * o * plane_out];
                    let xi = &x.data()[i * plane_in..(i + 1) * plane_in];
                    if let Some(gw) = gw.as_mut() {
                        let colbuf: &[T] = if g.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, &g, &mut cols);
                            &cols
                        };
                        T::gemm(o, plane_out, ckk, gi, false, colbuf, true, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[i * plane_in..(i + 1) * plane_in];
                        if g.is_pointwise() {
                            T::gemm(ckk, o, plane_out, wt.data(), true, gi, false, dst, false);
                        } else {
                            T::gemm(ckk, o, plane_out, wt.data(), true, gi, false, &mut gcols, false);
                            col2im(&gcols, &g, dst);
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::new(x.shape(), d)),
                    gw.map(|d| Tensor::new(wt.shape(), d)),
                ]
            }),
        )
    }

    /// Depthwise convolution, `weight: [c, 1, k, k]`.
    pub fn depthwise_conv2d(self, weight: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = x.dims4();
        let (c2, one, k, k2) = wt.dims4();
        assert!(c == c2 && one == 1 && k == k2, "depthwise_conv2d: weight must be [c, 1, k, k]");
        let g = Geom::new(c, h, w, k, stride, pad);
        let plane_in = h * w;
        let plane_out = g.ho * g.wo;

        let mut out = vec![T::zero(); n * c * plane_out];
        for i in 0..n * c {
            let ch = i % c;
            let xs = &x.data()[i * plane_in..(i + 1) * plane_in];
            let ys = &mut out[i * plane_out..(i + 1) * plane_out];
            for ky in 0..k {
                let (oy0, oy1) = g.oy_range(ky);
                for kx in 0..k {
                    let wv = wt.data()[(ch * k + ky) * k + kx];
                    let (ox0, ox1) = g.ox_range(kx);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xs[iy * w..(iy + 1) * w];
                        let yrow = &mut ys[oy * g.wo..(oy + 1) * g.wo];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }

        self.graph().record(
            Tensor::new(&[n, c, g.ho, g.wo], out),
            &[self, weight],
            Box::new(move |ctx| {
                let (x, wt, gr) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let mut gx = vec![T::zero(); if ctx.needs[0] { x.numel() } else { 0 }];
                let mut gw = vec![T::zero(); wt.numel()];
                for i in 0..n * c {
                    let ch = i % c;
                    let xs = &x.data()[i * plane_in..(i + 1) * plane_in];
                    let gs = &gr.data()[i * plane_out..(i + 1) * plane_out];
                    for ky in 0..k {
                        let (oy0, oy1) = g.oy_range(ky);
                        for kx in 0..k {
                            let widx = (ch * k + ky) * k + kx;
                            let wv = wt.data()[widx];
                            let (ox0, ox1) = g.ox_range(kx);
                            let mut acc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let grow = &gs[oy * g.wo..(oy + 1) * g.wo];
                                let xrow = &xs[iy * w..(iy + 1) * w];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * stride + kx - pad];
                                }
                                if ctx.needs[0] {
                                    let gxrow = &mut gx[i * plane_in + iy * w..i * plane_in + (iy + 1) * w];
                                    for ox in ox0..ox1 {
                                        gxrow[ox * stride + kx - pad] += wv * grow[ox];
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::new(x.shape(), gx)),
                    ctx.needs[1].then(|| Tensor::new(wt.shape(), gw)),
                ]
            }),
        )
    }
}
