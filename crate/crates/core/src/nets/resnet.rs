use jigwm_autograd::{Bound, Scalar, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Init, Linear, Norm};
use crate::{Error, Result};

/// Basic-block residual CNN ending in global average pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    /// Width of each stage; every stage after the first halves the resolution.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm_groups: usize,
}

impl Default for ResNetConfig {
    /// ResNet-18 layout.
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            norm_groups: 8,
        }
    }
}

impl ResNetConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("residual net needs stages, channels and blocks".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
struct Basic {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
    proj: Option<(Conv, Norm)>,
}

impl Basic {
    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.n1.forward(p, self.c1.forward(p, x)).relu();
        let y = self.n2.forward(p, self.c2.forward(p, y));
        let skip = match &self.proj {
            Some((c, n)) => n.forward(p, c.forward(p, x)),
            None => x,
        };
        y.add(skip).relu()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResNet {
    stem: Conv,
    stem_norm: Norm,
    blocks: Vec<Basic>,
}

impl ResNet {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &ResNetConfig) -> Self {
        let g = cfg.norm_groups;
        let c0 = cfg.channels[0];
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (s, &c) in cfg.channels.iter().enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let n = format!("{name}.s{s}b{b}");
                let proj = (stride != 1 || cin != c)
                    .then(|| (Conv::new(init, &format!("{n}.proj"), cin, c, 1, stride, 0), Norm::group(init, &format!("{n}.proj_norm"), c, g)));
                blocks.push(Basic {
                    c1: Conv::new(init, &format!("{n}.c1"), cin, c, 3, stride, 1),
                    n1: Norm::group(init, &format!("{n}.n1"), c, g),
                    c2: Conv::new(init, &format!("{n}.c2"), c, c, 3, 1, 1),
                    n2: Norm::group(init, &format!("{n}.n2"), c, g),
                    proj,
                });
                cin = c;
            }
        }
        Self {
            stem: Conv::new(init, &format!("{name}.stem"), 3, c0, 3, 1, 1),
            stem_norm: Norm::group(init, &format!("{name}.stem_norm"), c0, g),
            blocks,
        }
    }

    /// Pooled features `[n, feature_dim]`.
    pub fn features<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem_norm.forward(p, self.stem.forward(p, x)).relu();
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        h.mean_spatial()
    }
}

/// Two-layer perceptron with a ReLU, producing one logit per row.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, fin: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(init, &format!("{name}.l1"), fin, hidden),
            l2: Linear::new(init, &format!("{name}.l2"), hidden, 1),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.l2.forward(p, self.l1.forward(p, x).relu())
    }
}
