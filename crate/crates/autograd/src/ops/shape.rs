use std::rc::Rc;

use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// Concatenates along the batch axis.
    pub fn cat_batch<'g>(&'g self, parts: &[Var<'g, T>]) -> Var<'g, T> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let out = Tensor::cat_batch(&refs);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        self.record(
            out,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                lens.iter()
                    .zip(ctx.needs)
                    .map(|(&len, &need)| {
                        let s = need.then(|| ctx.grad.slice_batch(start, len));
                        start += len;
                        s
                    })
                    .collect()
            }),
        )
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.graph()
            .record(y, &[self], Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(&old))]))
    }

    /// `[n, c, h, w] -> [n, c*h*w]`.
    pub fn flatten(self) -> Var<'g, T> {
        let s = self.shape();
        self.reshape(&[s[0], s[1..].iter().product()])
    }

    pub fn slice_batch(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let y = x.slice_batch(start, len);
        let full = x.shape().to_vec();
        self.graph().record(
            y,
            &[self],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&full);
                let per = g.numel() / full[0].max(1);
                g.data_mut()[start * per..(start + len) * per].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Channel concatenation of two `[n, *, h, w]` tensors.
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let (n, ca, h, w) = a.dims4();
        let (n2, cb, h2, w2) = b.dims4();
        assert!(n == n2 && h == h2 && w == w2, "concat_channels shape mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut y = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            y.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
            y.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
        }
        self.graph().record(
            Tensor::new(&[n, ca + cb, h, w], y),
            &[self, other],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for i in 0..n {
                    let s = &g[i * (pa + pb)..(i + 1) * (pa + pb)];
                    ga.extend_from_slice(&s[..pa]);
                    gb.extend_from_slice(&s[pa..]);
                }
                vec![
                    Some(Tensor::new(&[n, ca, h, w], ga)),
                    Some(Tensor::new(&[n, cb, h, w], gb)),
                ]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (h * factor, w * factor);
        let mut y = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = src[(oy / factor) * w + ox / factor];
                }
            }
        }
        self.graph().record(
            Tensor::new(&[n, c, ho, wo], y),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(oy / factor) * w + ox / factor] += src[oy * wo + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], gx))]
            }),
        )
    }

    /// Average pooling with kernel = stride = `factor`.
    pub fn avg_pool(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: {h}x{w} not divisible by {factor}");
        let (ho, wo) = (h / factor, w / factor);
        let inv = T::one() / T::from_usize(factor * factor).unwrap();
        let mut y = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
            for iy in 0..h {
                for ix in 0..w {
                    dst[(iy / factor) * wo + ix / factor] += src[iy * w + ix] * inv;
                }
            }
        }
        self.graph().record(
            Tensor::new(&[n, c, ho, wo], y),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for iy in 0..h {
                        for ix in 0..w {
                            dst[iy * w + ix] = src[(iy / factor) * wo + ix / factor] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], gx))]
            }),
        )
    }

    /// `[n, c*f*f, h, w] -> [n, c, h*f, w*f]` (sub-pixel rearrangement).
    pub fn depth_to_space(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, cf, h, w) = x.dims4();
        let f2 = factor * factor;
        assert!(cf % f2 == 0, "depth_to_space: {cf} channels not divisible by {f2}");
        let c = cf / f2;
        let (ho, wo) = (h * factor, w * factor);
        // Output flat index -> input flat index.
        let map: Rc<Vec<usize>> = Rc::new(
            (0..n * c * ho * wo)
                .map(|o| {
                    let ox = o % wo;
                    let oy = (o / wo) % ho;
                    let ch = (o / (wo * ho)) % c;
                    let img = o / (wo * ho * c);
                    let sub = (oy % factor) * factor + ox % factor;
                    ((img * cf + ch * f2 + sub) * h + oy / factor) * w + ox / factor
                })
                .collect(),
        );
        let y = map.iter().map(|&i| x.data()[i]).collect();
        let shape_in = x.shape().to_vec();
        self.graph().record(
            Tensor::new(&[n, c, ho, wo], y),
            &[self],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); map.len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = ctx.grad.data()[o];
                }
                vec![Some(Tensor::new(&shape_in, gx))]
            }),
        )
    }

    /// Gathers pixels within every `h×w` plane: `out[p] = in[source[p]]`.
    /// `source` need not be a bijection; the backward pass accumulates.
    pub fn permute_pixels(self, source: Rc<Vec<usize>>) -> Var<'g, T> {
        let x = self.value();
        let (_, _, h, w) = x.dims4();
        let plane = h * w;
        assert_eq!(source.len(), plane, "permute_pixels: map size");
        let y = gather_planes(x.data(), &source, plane);
        self.graph().record(
            Tensor::new(x.shape(), y),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut gx = vec![T::zero(); g.numel()];
                for (gp, dp) in g.data().chunks(plane).zip(gx.chunks_mut(plane)) {
                    for (p, &s) in source.iter().enumerate() {
                        dp[s] += gp[p];
                    }
                }
                vec![Some(Tensor::new(g.shape(), gx))]
            }),
        )
    }
}

pub(crate) fn gather_planes<T: Copy>(data: &[T], source: &[usize], plane: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(data.len());
    for p in data.chunks(plane) {
        y.extend(source.iter().map(|&s| p[s]));
    }
    y
}
