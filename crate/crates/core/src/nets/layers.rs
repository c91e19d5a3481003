use jigwm_autograd::{Bound, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-6;
const GN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters under a name prefix.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut self.rng)));
        self.store.add(name, t)
    }

    /// He-normal for a kernel whose fan-in is `shape[1..]`.
    pub fn kaiming(&mut self, name: String, shape: &[usize]) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(name, shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: init.kaiming(format!("{name}.weight"), &[cout, cin, k, k]),
            b: init.zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn zeroed<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: init.zeros(format!("{name}.weight"), &[cout, cin, 1, 1]),
            b: init.zeros(format!("{name}.bias"), &[cout]),
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(p.var(self.w), self.stride, self.pad).add_channel(p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DwConv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl DwConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize, stride: usize) -> Self {
        Self {
            w: init.kaiming(format!("{name}.weight"), &[c, 1, k, k]),
            b: init.zeros(format!("{name}.bias"), &[c]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.depthwise_conv2d(p.var(self.w), self.stride, self.pad).add_channel(p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize) -> Self {
        Self {
            w: init.normal(format!("{name}.weight"), &[fout, fin], (1.0 / fin as f64).sqrt()),
            b: init.zeros(format!("{name}.bias"), &[fout]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul_t(p.var(self.w)).add_channel(p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Norm {
    Layer { g: ParamId, b: ParamId },
    Group { groups: usize, g: ParamId, b: ParamId },
}

impl Norm {
    pub fn layer<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        Norm::Layer {
            g: init.ones(format!("{name}.gamma"), &[c]),
            b: init.zeros(format!("{name}.beta"), &[c]),
        }
    }

    pub fn group<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, max_groups: usize) -> Self {
        Norm::Group {
            groups: gcd(c, max_groups.max(1)),
            g: init.ones(format!("{name}.gamma"), &[c]),
            b: init.zeros(format!("{name}.beta"), &[c]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        match *self {
            Norm::Layer { g, b } => x.layer_norm_channels(p.var(g), p.var(b), T::lit(LN_EPS)),
            Norm::Group { groups, g, b } => x.group_norm(groups, p.var(g), p.var(b), T::lit(GN_EPS)),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
