use jigwm_autograd::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{Conv, DwConv, Init, Norm};
use crate::{Error, Result};

/// Residual U-Net over the shuffled image built from ConvNeXt-V2 blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of 2× downsampling stages below the stem.
    pub unet_depth: usize,
    pub base_channels: usize,
    /// Channel count stops doubling at this value.
    pub max_channels: usize,
    /// Patchify stride of the stem; the head undoes it with a pixel shuffle.
    pub downsample_factor: usize,
    pub blocks_per_level: usize,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            unet_depth: 4,
            base_channels: 128,
            max_channels: 1024,
            downsample_factor: 2,
            blocks_per_level: 1,
            kernel: 7,
        }
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 32,
            max_channels: 128,
            ..Self::default()
        }
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.downsample_factor << self.unet_depth
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.downsample_factor) {
            return Err(Error::Config(format!("downsample_factor {} not in {{1, 2, 4}}", self.downsample_factor)));
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("encoder needs channels, blocks and an odd kernel".into()));
        }
        Ok(())
    }
}

/// dwconv → LayerNorm → 1×1 (4×) → GELU → GRN → 1×1 → residual.
#[derive(Clone, Debug)]
struct Block {
    dw: DwConv,
    norm: Norm,
    pw1: Conv,
    grn_g: jigwm_autograd::ParamId,
    grn_b: jigwm_autograd::ParamId,
    pw2: Conv,
}

impl Block {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, c: usize, k: usize) -> Self {
        Self {
            dw: DwConv::new(init, &format!("{name}.dw"), c, k, 1),
            norm: Norm::layer(init, &format!("{name}.norm"), c),
            pw1: Conv::new(init, &format!("{name}.pw1"), c, 4 * c, 1, 1, 0),
            grn_g: init.zeros(format!("{name}.grn.gamma"), &[4 * c]),
            grn_b: init.zeros(format!("{name}.grn.beta"), &[4 * c]),
            pw2: Conv::new(init, &format!("{name}.pw2"), 4 * c, c, 1, 1, 0),
        }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.norm.forward(p, self.dw.forward(p, x));
        let y = self.pw1.forward(p, y).gelu();
        let y = y.grn(p.var(self.grn_g), p.var(self.grn_b), T::lit(1e-6));
        x.add(self.pw2.forward(p, y))
    }
}

#[derive(Clone, Debug)]
struct Down {
    norm: Norm,
    conv: Conv,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Up {
    reduce: Conv,
    fuse: Conv,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar> {
    cfg: EncoderConfig,
    params: ParamStore<T>,
    stem: Conv,
    stem_norm: Norm,
    top: Vec<Block>,
    downs: Vec<Down>,
    ups: Vec<Up>,
    head_norm: Norm,
    head: Conv,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let f = cfg.downsample_factor;
        let c0 = cfg.channels(0);
        let stem = if f == 1 {
            Conv::new(&mut init, "enc.stem", 3, c0, 3, 1, 1)
        } else {
            Conv::new(&mut init, "enc.stem", 3, c0, f, f, 0)
        };
        let stem_norm = Norm::layer(&mut init, "enc.stem_norm", c0);
        let blocks = |init: &mut Init<'_, T>, name: &str, c: usize| {
            (0..cfg.blocks_per_level)
                .map(|i| Block::new(init, &format!("{name}.block{i}"), c, cfg.kernel))
                .collect::<Vec<_>>()
        };
        let top = blocks(&mut init, "enc.level0", c0);
        let downs = (1..=cfg.unet_depth)
            .map(|l| Down {
                norm: Norm::layer(&mut init, &format!("enc.down{l}.norm"), cfg.channels(l - 1)),
                conv: Conv::new(&mut init, &format!("enc.down{l}.conv"), cfg.channels(l - 1), cfg.channels(l), 2, 2, 0),
                blocks: blocks(&mut init, &format!("enc.level{l}"), cfg.channels(l)),
            })
            .collect();
        let ups = (0..cfg.unet_depth)
            .rev()
            .map(|l| Up {
                reduce: Conv::new(&mut init, &format!("enc.up{l}.reduce"), cfg.channels(l + 1), cfg.channels(l), 1, 1, 0),
                fuse: Conv::new(&mut init, &format!("enc.up{l}.fuse"), 2 * cfg.channels(l), cfg.channels(l), 1, 1, 0),
                blocks: blocks(&mut init, &format!("enc.uplevel{l}"), cfg.channels(l)),
            })
            .collect();
        let head_norm = Norm::layer(&mut init, "enc.head_norm", c0);
        let head = Conv::zeroed(&mut init, "enc.head", c0, 3 * f * f);
        Ok(Self {
            cfg,
            params,
            stem,
            stem_norm,
            top,
            downs,
            ups,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.cfg.size_multiple();
        match shape {
            [_, 3, h, w] if h % m == 0 && w % m == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Dimension(format!("encoder input {shape:?} needs [n, 3, h, w] with h, w multiples of {m}"))),
        }
    }

    /// Output = input + predicted residual, same shape as the input.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem_norm.forward(p, self.stem.forward(p, x));
        for b in &self.top {
            h = b.forward(p, h);
        }
        let mut skips = Vec::with_capacity(self.downs.len());
        for d in &self.downs {
            skips.push(h);
            h = d.conv.forward(p, d.norm.forward(p, h));
            for b in &d.blocks {
                h = b.forward(p, h);
            }
        }
        for (u, skip) in self.ups.iter().zip(skips.into_iter().rev()) {
            h = u.reduce.forward(p, h.upsample_nearest(2));
            h = u.fuse.forward(p, h.concat_channels(skip));
            for b in &u.blocks {
                h = b.forward(p, h);
            }
        }
        let r = self.head.forward(p, self.head_norm.forward(p, h));
        let r = if self.cfg.downsample_factor > 1 { r.depth_to_space(self.cfg.downsample_factor) } else { r };
        x.add(r)
    }

    /// Inference on a detached batch.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.forward(&p, g.constant(x.clone()));
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            unet_depth: 2,
            base_channels: 4,
            max_channels: 8,
            downsample_factor: 2,
            blocks_per_level: 1,
            kernel: 3,
        }
    }

    #[test]
    fn identity_at_init_and_shape_preserved() {
        let enc = Encoder::<f64>::new(tiny(), 1).unwrap();
        for (h, w) in [(8, 8), (16, 8), (24, 32)] {
            let x = Tensor::from_fn(&[2, 3, h, w], |i| (i % 17) as f64 / 17.0);
            let y = enc.apply(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(y, x);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let enc = Encoder::<f32>::new(tiny(), 1).unwrap();
        assert!(matches!(enc.apply(&Tensor::zeros(&[1, 3, 12, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn every_factor_builds() {
        for f in [1, 2, 4] {
            let cfg = EncoderConfig { downsample_factor: f, ..tiny() };
            let enc = Encoder::<f32>::new(cfg, 0).unwrap();
            let s = enc.config().size_multiple();
            assert_eq!(enc.apply(&Tensor::zeros(&[1, 3, s, s])).unwrap().shape(), &[1, 3, s, s]);
        }
        assert!(Encoder::<f32>::new(EncoderConfig { downsample_factor: 3, ..tiny() }, 0).is_err());
    }
}
