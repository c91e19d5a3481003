use crate::{Scalar, Tensor, Var};

/// Normalizes each index set (given by `members`) of `x` to zero mean and
/// unit variance. Returns `(xhat, inv_std per set)`.
fn normalize_sets<T: Scalar>(
    x: &[T],
    sets: usize,
    members: impl Fn(usize) -> Vec<usize>,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); sets];
    for s in 0..sets {
        let idx = members(s);
        let m = T::from_usize(idx.len()).unwrap();
        let mean = idx.iter().map(|&i| x[i]).sum::<T>() / m;
        let var = idx.iter().map(|&i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        inv[s] = is;
        for &i in &idx {
            xhat[i] = (x[i] - mean) * is;
        }
    }
    (xhat, inv)
}

/// Shared affine-normalization backward: `y = xhat * gamma[ch(i)] + beta[ch(i)]`.
#[allow(clippy::too_many_arguments)]
fn normalize_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    sets: usize,
    members: &dyn Fn(usize) -> Vec<usize>,
    channel_of: &dyn Fn(usize) -> usize,
    eps: T,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (xhat, inv) = normalize_sets(x.data(), sets, members, eps);
    let c = gamma.numel();
    let g = grad.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
        let ch = channel_of(i);
        dgamma[ch] += gv * xh;
        dbeta[ch] += gv;
    }
    let dx = needs[0].then(|| {
        let mut dx = vec![T::zero(); x.numel()];
        for s in 0..sets {
            let idx = members(s);
            let m = T::from_usize(idx.len()).unwrap();
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for &i in &idx {
                let d = g[i] * gamma.data()[channel_of(i)];
                sum_d += d;
                sum_dx += d * xhat[i];
            }
            for &i in &idx {
                let d = g[i] * gamma.data()[channel_of(i)];
                dx[i] = inv[s] / m * (m * d - sum_d - xhat[i] * sum_dx);
            }
        }
        Tensor::new(x.shape(), dx)
    });
    vec![
        dx,
        needs[1].then(|| Tensor::new(&[c], dgamma)),
        needs[2].then(|| Tensor::new(&[c], dbeta)),
    ]
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Group normalization over `[n, c, h, w]` with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        assert_eq!(gamma.value().shape(), [c]);
        assert_eq!(beta.value().shape(), [c]);
        let per_group = (c / groups) * h * w;
        let plane = h * w;
        let members = move |s: usize| (s * per_group..(s + 1) * per_group).collect::<Vec<_>>();
        let channel_of = move |i: usize| (i / plane) % c;
        let (xhat, _) = normalize_sets(x.data(), n * groups, members, eps);
        let gv = gamma.value();
        let bv = beta.value();
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[channel_of(i)] + bv.data()[channel_of(i)])
            .collect();
        self.graph().record(
            Tensor::new(x.shape(), y),
            &[self, gamma, beta],
            Box::new(move |ctx| {
                normalize_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, n * groups, &members, &channel_of, eps, ctx.needs)
            }),
        )
    }

    /// Layer normalization across channels at every pixel (channels-last
    /// LayerNorm expressed on an NCHW tensor).
    pub fn layer_norm_channels(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(gamma.value().shape(), [c]);
        assert_eq!(beta.value().shape(), [c]);
        let plane = h * w;
        let cf = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv = vec![T::zero(); n * plane];
        let mut mean = vec![T::zero(); plane];
        let mut var = vec![T::zero(); plane];
        for img in 0..n {
            let xs = &x.data()[img * c * plane..(img + 1) * c * plane];
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for ch in xs.chunks(plane) {
                for (m, &v) in mean.iter_mut().zip(ch) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= cf);
            for ch in xs.chunks(plane) {
                for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(ch) {
                    *s += (v - m) * (v - m);
                }
            }
            let is = &mut inv[img * plane..(img + 1) * plane];
            for (i, &s) in is.iter_mut().zip(&var) {
                *i = T::one() / (s / cf + eps).sqrt();
            }
            let xh = &mut xhat[img * c * plane..(img + 1) * c * plane];
            for (dst, src) in xh.chunks_mut(plane).zip(xs.chunks(plane)) {
                for (((d, &v), &m), &i) in dst.iter_mut().zip(src).zip(&mean).zip(is.iter()) {
                    *d = (v - m) * i;
                }
            }
        }
        let gv = gamma.value();
        let bv = beta.value();
        let mut y = xhat.clone();
        for (k, ch) in y.chunks_mut(plane).enumerate() {
            let (gc, bc) = (gv.data()[k % c], bv.data()[k % c]);
            ch.iter_mut().for_each(|v| *v = *v * gc + bc);
        }
        self.graph().record(
            Tensor::new(x.shape(), y),
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let (gamma, g) = (ctx.inputs[1], ctx.grad.data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (k, (gs, xs)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = k % c;
                    dgamma[ch] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                    dbeta[ch] += gs.iter().copied().sum::<T>();
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let mut sum_d = vec![T::zero(); plane];
                    let mut sum_dx = vec![T::zero(); plane];
                    for img in 0..n {
                        let range = img * c * plane..(img + 1) * c * plane;
                        let (gi, xi) = (&g[range.clone()], &xhat[range.clone()]);
                        sum_d.iter_mut().for_each(|v| *v = T::zero());
                        sum_dx.iter_mut().for_each(|v| *v = T::zero());
                        for (ch, (gs, xs)) in gi.chunks(plane).zip(xi.chunks(plane)).enumerate() {
                            let gc = gamma.data()[ch];
                            for p in 0..plane {
                                let d = gs[p] * gc;
                                sum_d[p] += d;
                                sum_dx[p] += d * xs[p];
                            }
                        }
                        let is = &inv[img * plane..(img + 1) * plane];
                        let di = &mut dx[range];
                        for (ch, ((dst, gs), xs)) in di.chunks_mut(plane).zip(gi.chunks(plane)).zip(xi.chunks(plane)).enumerate() {
                            let gc = gamma.data()[ch];
                            for p in 0..plane {
                                dst[p] = is[p] / cf * (cf * gs[p] * gc - sum_d[p] - xs[p] * sum_dx[p]);
                            }
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape(), dx)
                });
                vec![
                    dx,
                    ctx.needs[1].then(|| Tensor::new(&[c], dgamma)),
                    ctx.needs[2].then(|| Tensor::new(&[c], dbeta)),
                ]
            }),
        )
    }

    /// Global response normalization:
    /// `y = gamma * (x * N) + beta + x`, `N = G / (mean_c G + eps)`,
    /// `G[n, c] = ||x[n, c, :, :]||₂`.
    pub fn grn(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        assert_eq!(gamma.value().shape(), [c]);
        assert_eq!(beta.value().shape(), [c]);

        let stats = move |x: &[T]| {
            let gnorm: Vec<T> = x.chunks(plane).map(|p| p.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
            let denom: Vec<T> = gnorm
                .chunks(c)
                .map(|gs| gs.iter().copied().sum::<T>() / T::from_usize(c).unwrap() + eps)
                .collect();
            (gnorm, denom)
        };
        let (gnorm, denom) = stats(x.data());
        let gv = gamma.value();
        let bv = beta.value();
        let y = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let nc = i / plane;
                let ch = nc % c;
                gv.data()[ch] * v * (gnorm[nc] / denom[nc / c]) + bv.data()[ch] + v
            })
            .collect();

        self.graph().record(
            Tensor::new(x.shape(), y),
            &[self, gamma, beta],
            Box::new(move |ctx| {
                let (x, gamma, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let (gnorm, denom) = stats(x.data());
                let cf = T::from_usize(c).unwrap();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                // a[n,c] = dL/dN[n,c]
                let mut a = vec![T::zero(); n * c];
                for nc in 0..n * c {
                    let ch = nc % c;
                    let xs = &x.data()[nc * plane..(nc + 1) * plane];
                    let gs = &g.data()[nc * plane..(nc + 1) * plane];
                    let gx: T = xs.iter().zip(gs).map(|(&u, &v)| u * v).sum();
                    let nrm = gnorm[nc] / denom[nc / c];
                    dgamma[ch] += gx * nrm;
                    dbeta[ch] += gs.iter().copied().sum();
                    a[nc] = gamma.data()[ch] * gx;
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); x.numel()];
                    for img in 0..n {
                        let d = denom[img];
                        let cross: T = (0..c).map(|ch| a[img * c + ch] * gnorm[img * c + ch]).sum();
                        for ch in 0..c {
                            let nc = img * c + ch;
                            let dg = a[nc] / d - cross / (cf * d * d);
                            let nrm = gnorm[nc] / d;
                            let scale = gamma.data()[ch] * nrm + T::one();
                            for p in 0..plane {
                                let i = nc * plane + p;
                                let through_g = if gnorm[nc] > T::zero() { dg * x.data()[i] / gnorm[nc] } else { T::zero() };
                                dx[i] = g.data()[i] * scale + through_g;
                            }
                        }
                    }
                    Tensor::new(x.shape(), dx)
                });
                vec![
                    dx,
                    ctx.needs[1].then(|| Tensor::new(&[c], dgamma)),
                    ctx.needs[2].then(|| Tensor::new(&[c], dbeta)),
                ]
            }),
        )
    }
}
