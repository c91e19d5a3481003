use crate::{Scalar, Tensor, Var};

/// Splits a rank-2 `[n, c]` or rank-4 `[n, c, h, w]` shape into
/// `(n, c, plane)`.
fn ncp(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, c] => (*n, *c, 1),
        [n, c, h, w] => (*n, *c, h * w),
        _ => panic!("expected rank 2 or 4, got {shape:?}"),
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let s = Tensor::scalar(x.sum());
        self.graph().record(
            s,
            &[self],
            Box::new(|ctx| {
                let g = ctx.grad.item();
                vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Global average pool: `[n, c, h, w] -> [n, c]`.
    pub fn mean_spatial(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.graph().record(
            Tensor::new(&[n, c], data),
            &[self],
            Box::new(move |ctx| {
                let mut gx = Vec::with_capacity(n * c * plane);
                for &g in ctx.grad.data() {
                    gx.extend(std::iter::repeat_n(g * inv, plane));
                }
                vec![Some(Tensor::new(&[n, c, h, w], gx))]
            }),
        )
    }

    /// `x + b` with `b: [c]` broadcast over batch and space.
    pub fn add_channel(self, bias: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let b = bias.value();
        let (_, c, plane) = ncp(x.shape());
        assert_eq!(b.shape(), [c], "add_channel bias shape");
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / plane) % c];
        }
        self.graph().record(
            y,
            &[self, bias],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (i, &v) in g.data().iter().enumerate() {
                        acc[(i / plane) % c] += v;
                    }
                    Tensor::new(&[c], acc)
                });
                vec![ctx.needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    /// `x * s` with `s: [c]` broadcast over batch and space.
    pub fn mul_channel(self, scale: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let s = scale.value();
        let (_, c, plane) = ncp(x.shape());
        assert_eq!(s.shape(), [c], "mul_channel scale shape");
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= s.data()[(i / plane) % c];
        }
        self.graph().record(
            y,
            &[self, scale],
            Box::new(move |ctx| {
                let (x, s, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * s.data()[(i / plane) % c])
                        .collect();
                    Tensor::new(x.shape(), data)
                });
                let gs = ctx.needs[1].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (i, (&v, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                        acc[(i / plane) % c] += v * xv;
                    }
                    Tensor::new(&[c], acc)
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x * s` with `s: [n, c]` broadcast over space (squeeze-excite gating).
    pub fn mul_nc(self, scale: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let s = scale.value();
        let (n, c, plane) = ncp(x.shape());
        assert_eq!(s.shape(), [n, c], "mul_nc scale shape");
        let mut y = (*x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= s.data()[i / plane];
        }
        self.graph().record(
            y,
            &[self, scale],
            Box::new(move |ctx| {
                let (x, s, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let data = g.data().iter().enumerate().map(|(i, &v)| v * s.data()[i / plane]).collect();
                    Tensor::new(x.shape(), data)
                });
                let gs = ctx.needs[1].then(|| {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(x.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::new(&[n, c], data)
                });
                vec![gx, gs]
            }),
        )
    }

    /// `x · wᵀ` for `x: [n, f]`, `w: [o, f]`.
    pub fn matmul_t(self, weight: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (n, f) = x.dims2();
        let (o, f2) = w.dims2();
        assert_eq!(f, f2, "matmul_t inner dim");
        let mut y = vec![T::zero(); n * o];
        T::gemm(n, f, o, x.data(), false, w.data(), true, &mut y, false);
        self.graph().record(
            Tensor::new(&[n, o], y),
            &[self, weight],
            Box::new(move |ctx| {
                let (x, w, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let gx = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); n * f];
                    T::gemm(n, o, f, g.data(), false, w.data(), false, &mut d, false);
                    Tensor::new(&[n, f], d)
                });
                let gw = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); o * f];
                    T::gemm(o, n, f, g.data(), true, x.data(), false, &mut d, false);
                    Tensor::new(&[o, f], d)
                });
                vec![gx, gw]
            }),
        )
    }
}
