//! The encoder/decoder pair with its keyed embed and detect transforms.

use std::rc::Rc;

use jigwm_autograd::{Bound, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::jigsaw::JigsawKey;
use crate::nets::{blend_edges_var, edge_mask, Decoder, DecoderConfig, Encoder, EncoderConfig, DEFAULT_BLEND_WIDTH};
use crate::{Error, Result};

/// Images per inference chunk.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: [usize; 2],
    pub blend_width: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: [4, 4],
            blend_width: DEFAULT_BLEND_WIDTH,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// 64×64 images, 4×4 grid, small networks.
    pub fn desk() -> Self {
        Self {
            grid: [4, 4],
            blend_width: 1,
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.decoder.input_size[0], self.decoder.input_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        let (h, w) = self.resolution();
        let [r, c] = self.grid;
        if r * c < 2 || h % r != 0 || w % c != 0 {
            return Err(Error::Config(format!("{h}x{w} does not divide into a {r}x{c} grid")));
        }
        let m = self.encoder.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("resolution {h}x{w} must be a multiple of {m} for the encoder")));
        }
        Ok(())
    }
}

/// Precomputed pixel maps for one key at one resolution.
#[derive(Clone, Debug)]
pub struct KeyMaps {
    pub shuffle: Rc<Vec<usize>>,
    pub unshuffle: Rc<Vec<usize>>,
}

impl KeyMaps {
    pub fn new(key: &JigsawKey, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            shuffle: Rc::new(key.shuffle_map(height, width)?),
            unshuffle: Rc::new(key.unshuffle_map(height, width)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone(), seed)?,
            decoder: Decoder::new(config.decoder.clone(), seed.wrapping_add(1))?,
            config,
        })
    }

    fn check_key(&self, key: &JigsawKey) -> Result<()> {
        let (r, c) = key.grid();
        if [r, c] != self.config.grid {
            return Err(Error::Dimension(format!("key grid {r}x{c} differs from model grid {:?}", self.config.grid)));
        }
        Ok(())
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.resolution();
        match shape {
            [_, 3, sh, sw] if (*sh, *sw) == (h, w) => Ok(()),
            _ => Err(Error::Dimension(format!("model expects [n, 3, {h}, {w}], got {shape:?}"))),
        }
    }

    /// `clamp(blend(x, S⁻¹(E(S(x)))))` on the tape.
    pub fn embed_var<'g>(&self, enc: &Bound<'g, T>, x: Var<'g, T>, maps: &KeyMaps) -> Result<Var<'g, T>> {
        let (h, w) = self.config.resolution();
        let mask = edge_mask(h, w, (self.config.grid[0], self.config.grid[1]), self.config.blend_width)?;
        let r = self.encoder.forward(enc, x.permute_pixels(maps.shuffle.clone()));
        let x_w = r.permute_pixels(maps.unshuffle.clone());
        Ok(blend_edges_var(x, x_w, &mask).clamp(T::zero(), T::one()))
    }

    /// Scores `D(S(x))`, shape `[n, 1]`.
    pub fn score_var<'g>(&self, dec: &Bound<'g, T>, x: Var<'g, T>, shuffle: &Rc<Vec<usize>>) -> Var<'g, T> {
        self.decoder.forward(dec, x.permute_pixels(shuffle.clone()))
    }

    pub fn embed_tensor(&self, x: &Tensor<T>, key: &JigsawKey) -> Result<Tensor<T>> {
        self.check_key(key)?;
        self.check_batch(x.shape())?;
        let (h, w) = self.config.resolution();
        let maps = KeyMaps::new(key, h, w)?;
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let g = Graph::new();
            let p = self.encoder.params().bind(&g, false);
            let xv = g.constant(x.slice_batch(start, CHUNK.min(n - start)));
            parts.push((*self.embed_var(&p, xv, &maps)?.value()).clone());
        }
        Ok(Tensor::cat_batch(&parts.iter().collect::<Vec<_>>()))
    }

    pub fn score_tensor(&self, x: &Tensor<T>, key: &JigsawKey) -> Result<Vec<T>> {
        self.check_key(key)?;
        self.check_batch(x.shape())?;
        let (h, w) = self.config.resolution();
        let shuffle = Rc::new(key.shuffle_map(h, w)?);
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let g = Graph::new();
            let p = self.decoder.params().bind(&g, false);
            let xv = g.constant(x.slice_batch(start, CHUNK.min(n - start)));
            out.extend_from_slice(self.score_var(&p, xv, &shuffle).value().data());
        }
        Ok(out)
    }

    pub fn embed(&self, images: &[Image<T>], key: &JigsawKey) -> Result<Vec<Image<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        Ok(Image::unbatch(&self.embed_tensor(&Image::batch(images)?, key)?))
    }

    pub fn scores(&self, images: &[Image<T>], key: &JigsawKey) -> Result<Vec<T>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        self.score_tensor(&Image::batch(images)?, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr;
    use crate::jigsaw::new_key;
    use crate::synth;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.base_channels = 4;
        cfg.encoder.max_channels = 8;
        cfg.encoder.unet_depth = 2;
        cfg.decoder.input_size = [16, 16];
        cfg.decoder.stages.truncate(2);
        cfg
    }

    #[test]
    fn identity_encoder_embeds_losslessly() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let key = new_key((4, 4), 1).unwrap();
        let imgs = synth::corpus(3, 16, 16, 5);
        let out = m.embed(&imgs, &key).unwrap();
        for (a, b) in imgs.iter().zip(&out) {
            assert!(psnr(a, b) > 50.0);
        }
        assert_eq!(out, m.embed(&imgs, &key).unwrap());
    }

    #[test]
    fn rejects_wrong_grid_and_size() {
        let m = Model::<f32>::new(tiny(), 3).unwrap();
        let imgs = synth::corpus(1, 16, 16, 5);
        assert!(m.scores(&imgs, &new_key((2, 2), 1).unwrap()).is_err());
        let big = synth::corpus(1, 32, 32, 5);
        assert!(m.scores(&big, &new_key((4, 4), 1).unwrap()).is_err());
    }
}
