use std::rc::Rc;

use crate::{Scalar, Tensor, Var};

/// Per-pixel boolean mask over an `h×w` plane, broadcast across batch and
/// channels by [`Var::masked_merge`].
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub bits: Rc<Vec<bool>>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask size");
        Self {
            height,
            width,
            bits: Rc::new(bits),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'g, T: Scalar> Var<'g, T> {
    /// Elementwise map with derivative `df(x, y)` expressed through the
    /// input `x` and output `y`.
    pub fn unary<F, D>(self, f: F, df: D) -> Var<'g, T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let y = self.value().map(f);
        self.graph().record(
            y,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0];
                let data = x
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(x.shape(), data))]
            }),
        )
    }

    fn binary<F, Da, Db>(self, other: Var<'g, T>, f: F, da: Da, db: Db) -> Var<'g, T>
    where
        F: Fn(T, T) -> T,
        Da: Fn(T, T) -> T + 'static,
        Db: Fn(T, T) -> T + 'static,
    {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let y = a.zip_map(&b, f);
        self.graph().record(
            y,
            &[self, other],
            Box::new(move |ctx| {
                let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let grad_with = |d: &dyn Fn(T, T) -> T| {
                    let data = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .zip(g.data())
                        .map(|((&x, &y), &g)| g * d(x, y))
                        .collect();
                    Tensor::new(a.shape(), data)
                };
                vec![
                    ctx.needs[0].then(|| grad_with(&da)),
                    ctx.needs[1].then(|| grad_with(&db)),
                ]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        self.binary(other, |a, b| a / b, |_, b| T::one() / b, |a, b| -a / (b * b))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(|x| x.abs(), |x, _| x.signum() * T::from_u8((x != T::zero()) as u8).unwrap())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g, T> {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
            },
        )
    }

    pub fn hardswish(self) -> Var<'g, T> {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        self.unary(
            move |x| x * (x + three).max(T::zero()).min(six) / six,
            move |x, _| {
                if x <= -three {
                    T::zero()
                } else if x >= three {
                    T::one()
                } else {
                    (x + x + three) / six
                }
            },
        )
    }

    pub fn hardsigmoid(self) -> Var<'g, T> {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        self.unary(
            move |x| (x + three).max(T::zero()).min(six) / six,
            move |x, _| {
                if x <= -three || x >= three {
                    T::zero()
                } else {
                    T::one() / six
                }
            },
        )
    }

    /// Elementwise smooth-L1 (Huber with unit threshold) of the value itself.
    pub fn smooth_l1(self) -> Var<'g, T> {
        let half = T::lit(0.5);
        self.unary(
            move |d| {
                let a = d.abs();
                if a < T::one() {
                    half * d * d
                } else {
                    a - half
                }
            },
            |d, _| d.max(-T::one()).min(T::one()),
        )
    }

    /// Clamp with the usual pass-through gradient inside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Picks `self` where the pixel mask is set and `other` elsewhere, for
    /// every batch item and channel.
    pub fn masked_merge(self, other: Var<'g, T>, mask: &PixelMask) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "masked_merge shape mismatch");
        let (_, _, h, w) = a.dims4();
        assert_eq!((h, w), (mask.height, mask.width), "mask plane size");
        let bits = mask.bits.clone();
        let plane = h * w;
        let pick = move |x: &Tensor<T>, y: &Tensor<T>, keep_true: bool| {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .enumerate()
                .map(|(i, (&p, &q))| if bits[i % plane] == keep_true { p } else { q })
                .collect();
            Tensor::new(x.shape(), data)
        };
        let out = pick(&a, &b, true);
        self.graph().record(
            out,
            &[self, other],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let zero = Tensor::zeros(g.shape());
                vec![
                    ctx.needs[0].then(|| pick(g, &zero, true)),
                    ctx.needs[1].then(|| pick(&zero, g, true)),
                ]
            }),
        )
    }
}
