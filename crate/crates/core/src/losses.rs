//! Watermark (binomial deviance with temperature), visual and ranking
//! losses, each as a plain evaluation and as a tape expression.

use jigwm_autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Margin λ between positive and negative scores.
    pub lambda: f64,
    /// Temperature τ > 0.
    pub tau: f64,
    /// Perceptual weight α.
    pub alpha: f64,
    /// Smooth-L1 weight β.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 0.1,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `mean₊ log(1 + e^{(λ−k₊)/τ}) + mean₋ log(1 + e^{(k₋−λ)/τ})`.
pub fn watermark_loss(k_pos: &[f64], k_neg: &[f64], w: &LossWeights) -> Result<f64> {
    if k_pos.is_empty() || k_neg.is_empty() {
        return Err(Error::Contract("watermark loss needs positive and negative scores".into()));
    }
    let pos = k_pos.iter().map(|&k| softplus((w.lambda - k) / w.tau)).sum::<f64>() / k_pos.len() as f64;
    let neg = k_neg.iter().map(|&k| softplus((k - w.lambda) / w.tau)).sum::<f64>() / k_neg.len() as f64;
    Ok(pos + neg)
}

/// Tape form of [`watermark_loss`]; scores of any shape.
pub fn watermark_loss_var<'g, T: Scalar>(k_pos: Var<'g, T>, k_neg: Var<'g, T>, w: &LossWeights) -> Var<'g, T> {
    let inv_tau = T::lit(1.0 / w.tau);
    let lambda = T::lit(w.lambda);
    let pos = k_pos.neg().add_scalar(lambda).scale(inv_tau).softplus().mean();
    let neg = k_neg.add_scalar(-lambda).scale(inv_tau).softplus().mean();
    pos.add(neg)
}

/// Mean smooth-L1 (Huber with unit threshold) between two batches.
pub fn smooth_l1_var<'g, T: Scalar>(x: Var<'g, T>, y: Var<'g, T>) -> Var<'g, T> {
    x.sub(y).smooth_l1().mean()
}

/// Frozen image-similarity distance used by the visual loss.
pub trait PerceptualMetric<T: Scalar> {
    fn name(&self) -> &str;

    /// Mean distance over a batch of NCHW images.
    fn distance_var<'g>(&self, x: Var<'g, T>, y: Var<'g, T>) -> Var<'g, T>;

    fn distance(&self, x: &Image<T>, y: &Image<T>) -> Result<T> {
        x.same_shape(y)?;
        let g = Graph::new();
        let d = self.distance_var(g.constant(x.to_tensor()), g.constant(y.to_tensor()));
        Ok(d.value().item())
    }
}

/// Multi-scale fixed filter bank: opponent-colour smoothing plus luminance
/// gradient and Laplacian filters, per-pixel channel normalization, squared
/// feature difference averaged over space and summed over scales.
#[derive(Clone, Debug)]
pub struct FilterBankPerceptual<T> {
    bank: Tensor<T>,
    scales: usize,
    eps: T,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const CHROMA_A: [f64; 3] = [1.0, -1.0, 0.0];
const CHROMA_B: [f64; 3] = [0.5, 0.5, -1.0];
const BOX: [f64; 9] = [1.0 / 9.0; 9];
const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const LAPLACE: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

impl<T: Scalar> Default for FilterBankPerceptual<T> {
    fn default() -> Self {
        Self::new(3)
    }
}

impl<T: Scalar> FilterBankPerceptual<T> {
    pub fn new(scales: usize) -> Self {
        let filters: [(&[f64; 3], &[f64; 9]); 8] = [
            (&LUMA, &BOX),
            (&CHROMA_A, &BOX),
            (&CHROMA_B, &BOX),
            (&LUMA, &SOBEL_X),
            (&LUMA, &SOBEL_Y),
            (&LUMA, &LAPLACE),
            (&CHROMA_A, &SOBEL_X),
            (&CHROMA_B, &SOBEL_Y),
        ];
        let mut data = Vec::with_capacity(8 * 27);
        for (colour, spatial) in filters {
            for &c in colour {
                data.extend(spatial.iter().map(|&s| T::lit(c * s)));
            }
        }
        Self {
            bank: Tensor::new(&[8, 3, 3, 3], data),
            scales: scales.max(1),
            eps: T::lit(1e-2),
        }
    }
}

impl<T: Scalar> PerceptualMetric<T> for FilterBankPerceptual<T> {
    fn name(&self) -> &str {
        "filter_bank"
    }

    fn distance_var<'g>(&self, x: Var<'g, T>, y: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        let bank = g.constant(self.bank.clone());
        let ones = g.constant(Tensor::ones(&[8]));
        let zeros = g.constant(Tensor::zeros(&[8]));
        let (mut x, mut y) = (x, y);
        let mut total: Option<Var<'g, T>> = None;
        for s in 0..self.scales {
            if s > 0 {
                let shape = x.shape();
                if shape[2] % 2 != 0 || shape[3] % 2 != 0 || shape[2] < 6 {
                    break;
                }
                x = x.avg_pool(2);
                y = y.avg_pool(2);
            }
            let fx = x.conv2d(bank, 1, 1).layer_norm_channels(ones, zeros, self.eps);
            let fy = y.conv2d(bank, 1, 1).layer_norm_channels(ones, zeros, self.eps);
            let d = fx.sub(fy).square().mean();
            total = Some(match total {
                Some(t) => t.add(d),
                None => d,
            });
        }
        total.expect("at least one scale")
    }
}

/// `α·perceptual + β·smooth-L1`.
pub fn visual_loss_var<'g, T: Scalar>(
    x: Var<'g, T>,
    x_w: Var<'g, T>,
    w: &LossWeights,
    perceptual: &dyn PerceptualMetric<T>,
) -> Var<'g, T> {
    let l1 = smooth_l1_var(x_w, x).scale(T::lit(w.beta));
    if w.alpha == 0.0 {
        return l1;
    }
    perceptual.distance_var(x, x_w).scale(T::lit(w.alpha)).add(l1)
}

pub fn visual_loss<T: Scalar>(x: &Image<T>, x_w: &Image<T>, w: &LossWeights, perceptual: &dyn PerceptualMetric<T>) -> Result<T> {
    x.same_shape(x_w)?;
    let g = Graph::new();
    let l = visual_loss_var(g.constant(x.to_tensor()), g.constant(x_w.to_tensor()), w, perceptual);
    Ok(l.value().item())
}

/// `P_ij = σ(s_i − s_j)`.
pub fn ranknet_prob(s_i: f64, s_j: f64) -> f64 {
    let d = s_i - s_j;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

pub const RANKNET_EPS: f64 = 1e-7;

/// Binary cross-entropy of the pair label against `p`, with `p` clamped to
/// `[ε, 1−ε]`.
pub fn ranknet_loss(y: f64, p: f64) -> f64 {
    let p = p.clamp(RANKNET_EPS, 1.0 - RANKNET_EPS);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

pub fn ranknet_prob_var<'g, T: Scalar>(s_i: Var<'g, T>, s_j: Var<'g, T>) -> Var<'g, T> {
    s_i.sub(s_j).sigmoid()
}

/// Mean of [`ranknet_loss`] over a batch of labels.
pub fn ranknet_loss_var<'g, T: Scalar>(y: &Tensor<T>, p: Var<'g, T>) -> Var<'g, T> {
    let g = p.graph();
    let eps = T::lit(RANKNET_EPS);
    let p = p.clamp(eps, T::one() - eps);
    let yv = g.constant(y.clone());
    let one_minus_y = g.constant(y.map(|v| T::one() - v));
    let a = yv.mul(p.ln());
    let b = one_minus_y.mul(p.neg().add_scalar(T::one()).ln());
    a.add(b).neg().mean()
}
