//! Watermark removal: white-box PGD on the keyed decoder, PGD transferred
//! from a surrogate classifier, and regeneration through an edit oracle.

use std::rc::Rc;

use jigwm_autograd::{AdamW, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hav::HavModel;
use crate::image::Image;
use crate::jigsaw::JigsawKey;
use crate::losses::ranknet_loss_var;
use crate::model::Model;
use crate::nets::layers::Init;
use crate::nets::resnet::{Mlp, ResNet};
use crate::nets::ResNetConfig;
use crate::oracle::{EditJob, OracleClient};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub linf_budget: f64,
    pub steps: usize,
    /// Defaults to a tenth of the budget.
    pub step_size: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            linf_budget: 8.0 / 255.0,
            steps: 40,
            step_size: None,
        }
    }
}

impl AttackConfig {
    /// A zero budget is accepted and leaves images unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.linf_budget >= 0.0 && self.linf_budget.is_finite()) || self.steps == 0 {
            return Err(Error::Config(format!("invalid attack config {self:?}")));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step size {s} must be positive")));
            }
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.linf_budget / 10.0)
    }
}

/// Largest representable `v ≤ target` found by shrinking the offset; keeps
/// `|v − x0| ≤ eps` exact in f64 despite rounding in `T`.
fn inner_bound<T: Scalar>(x0: T, eps: f64, up: bool) -> T {
    let x0f = x0.as_f64();
    let mut e = eps;
    loop {
        let v = if up { x0 + T::lit(e) } else { x0 - T::lit(e) };
        if (v.as_f64() - x0f).abs() <= eps {
            return v;
        }
        e *= 1.0 - 1e-3;
    }
}

/// Per-pixel box `[max(0, x0 − ε), min(1, x0 + ε)]`.
fn ball<T: Scalar>(x0: &Tensor<T>, eps: f64) -> (Tensor<T>, Tensor<T>) {
    let lo = x0.map(|v| inner_bound(v, eps, false).max(T::zero()));
    let hi = x0.map(|v| inner_bound(v, eps, true).min(T::one()));
    (lo, hi)
}

/// Sign-gradient descent of the summed score, projected each step.
pub fn pgd<T, F>(x: &[Image<T>], cfg: &AttackConfig, score: F) -> Result<Vec<Image<T>>>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, Var<'g, T>) -> Var<'g, T>,
{
    cfg.validate()?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let x0 = Image::batch(x)?;
    if cfg.linf_budget == 0.0 {
        return Ok(x.to_vec());
    }
    let (lo, hi) = ball(&x0, cfg.linf_budget);
    let step = T::lit(cfg.step());
    let mut cur = x0.clone();
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let xv = g.leaf(cur.clone());
        let grads = g.backward(score(&g, xv).sum());
        let grad = grads.get_or_zeros(xv);
        let moved: Vec<T> = cur
            .data()
            .iter()
            .zip(grad.data())
            .zip(lo.data().iter().zip(hi.data()))
            .map(|((&v, &d), (&l, &h))| {
                let s = if d > T::zero() { -step } else if d < T::zero() { step } else { T::zero() };
                (v + s).max(l).min(h)
            })
            .collect();
        cur = Tensor::new(cur.shape(), moved);
    }
    Ok(Image::unbatch(&cur))
}

/// White-box PGD against `D(S(x))`.
pub fn pgd_attack<T: Scalar>(x_w: &[Image<T>], key: &JigsawKey, model: &Model<T>, cfg: &AttackConfig) -> Result<Vec<Image<T>>> {
    let (h, w) = model.config.resolution();
    model.scores(&x_w[..x_w.len().min(1)], key)?;
    let shuffle = Rc::new(key.shuffle_map(h, w)?);
    let mut out = Vec::with_capacity(x_w.len());
    for chunk in x_w.chunks(ATTACK_CHUNK) {
        out.extend(pgd(chunk, cfg, |g, x| {
            let p = model.decoder.params().bind(g, false);
            model.score_var(&p, x, &shuffle)
        })?);
    }
    Ok(out)
}

const ATTACK_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub backbone: ResNetConfig,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            backbone: ResNetConfig::desk(),
            hidden: 64,
            epochs: 3,
            batch: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Binary watermark-presence classifier that sees only unshuffled images.
#[derive(Clone, Debug)]
pub struct Surrogate<T: Scalar = f32> {
    pub config: SurrogateConfig,
    params: ParamStore<T>,
    backbone: ResNet,
    head: Mlp,
    trained: bool,
}

impl<T: Scalar> Surrogate<T> {
    pub fn new(config: SurrogateConfig) -> Result<Self> {
        config.backbone.validate()?;
        if config.hidden == 0 || config.batch == 0 {
            return Err(Error::Config("surrogate needs a hidden layer and a batch".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, config.seed);
        let backbone = ResNet::new(&mut init, "surrogate.backbone", &config.backbone);
        let head = Mlp::new(&mut init, "surrogate.head", config.backbone.feature_dim(), config.hidden);
        Ok(Self {
            config,
            params,
            backbone,
            head,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Probability of watermark presence, `[n, 1]`.
    pub fn score_var<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.head.forward(p, self.backbone.features(p, x)).sigmoid()
    }

    pub fn scores(&self, x: &[Image<T>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(ATTACK_CHUNK) {
            let g = Graph::new();
            let p = self.params.bind(&g, false);
            let s = self.score_var(&p, g.constant(Image::batch(chunk)?));
            out.extend(s.value().data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

/// Binary cross-entropy on watermarked (label 1) and clean (label 0) images;
/// returns the model and the mean loss of each epoch.
pub fn train_surrogate<T: Scalar>(marked: &[Image<T>], clean: &[Image<T>], config: SurrogateConfig) -> Result<(Surrogate<T>, Vec<f64>)> {
    if marked.is_empty() || clean.is_empty() {
        return Err(Error::Contract("surrogate needs watermarked and clean examples".into()));
    }
    let mut s = Surrogate::new(config)?;
    let c = &s.config;
    let mut opt = AdamW::new(&s.params, T::lit(0.9), T::lit(0.999), T::lit(c.weight_decay));
    let mut items: Vec<(&Image<T>, f64)> = marked.iter().map(|m| (m, 1.0)).chain(clean.iter().map(|m| (m, 0.0))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let (lr, batch) = (T::lit(c.lr), c.batch);
    let mut history = Vec::new();
    for _ in 0..c.epochs {
        items.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in items.chunks(batch) {
            let imgs: Vec<Image<T>> = chunk.iter().map(|(m, _)| (*m).clone()).collect();
            let y = Tensor::new(&[chunk.len(), 1], chunk.iter().map(|(_, y)| T::lit(*y)).collect());
            let g = Graph::new();
            let p = s.params.bind(&g, true);
            let loss = ranknet_loss_var(&y, s.score_var(&p, g.constant(Image::batch(&imgs)?)));
            let v = loss.value().item().as_f64();
            let grads = p.grads(&g.backward(loss));
            if v.is_finite() && grads.iter().all(Tensor::all_finite) {
                opt.step(&mut s.params, &grads, lr);
            }
            total += v * chunk.len() as f64;
        }
        history.push(total / items.len() as f64);
    }
    s.trained = true;
    Ok((s, history))
}

/// PGD against the surrogate's presence probability.
pub fn surrogate_attack<T: Scalar>(x_w: &[Image<T>], surrogate: &Surrogate<T>, cfg: &AttackConfig) -> Result<Vec<Image<T>>> {
    if !surrogate.trained {
        return Err(Error::Contract("surrogate has not been trained".into()));
    }
    let mut out = Vec::with_capacity(x_w.len());
    for chunk in x_w.chunks(ATTACK_CHUNK) {
        out.extend(pgd(chunk, cfg, |g, x| {
            let p = surrogate.params.bind(g, false);
            surrogate.score_var(&p, x)
        })?);
    }
    Ok(out)
}

/// Default edit requested from the oracle by the regeneration attack.
pub const REGENERATION_INSTRUCTION: &str = "regenerate the image";

/// Sends every image through the oracle once, unconstrained.
pub fn regeneration_attack<T: Scalar>(x_w: &[Image<T>], oracle: &OracleClient, instruction: &str, seed: u64) -> Result<Vec<Image<T>>> {
    let jobs: Vec<EditJob<T>> = x_w
        .iter()
        .enumerate()
        .map(|(i, im)| EditJob {
            id: format!("{seed:016x}-regen-{i}"),
            instruction: instruction.to_string(),
            images: vec![im.clone()],
        })
        .collect();
    Ok(oracle.edit(&jobs)?.into_iter().map(|mut v| v.remove(0)).collect())
}

/// Fraction of attacked scores strictly below `threshold`.
pub fn asr(scores_after: &[f64], threshold: f64) -> Result<f64> {
    if scores_after.is_empty() {
        return Err(Error::Contract("ASR of an empty score list".into()));
    }
    Ok(scores_after.iter().filter(|&&s| s < threshold).count() as f64 / scores_after.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    /// `None` for unconstrained attacks.
    pub budget: Option<f64>,
    pub steps: Option<usize>,
    pub asr: f64,
    /// Mean HAV between watermarked inputs and attack outputs, when a scorer
    /// was supplied.
    pub mean_hav: Option<f64>,
}

/// Scores the attack outputs under `key` and summarises them at `threshold`.
#[allow(clippy::too_many_arguments)]
pub fn attack_report<T: Scalar>(
    attack: &str,
    cfg: Option<&AttackConfig>,
    model: &Model<T>,
    key: &JigsawKey,
    x_w: &[Image<T>],
    attacked: &[Image<T>],
    threshold: f64,
    hav: Option<&HavModel<T>>,
) -> Result<AttackReport> {
    let scores: Vec<f64> = model.scores(attacked, key)?.into_iter().map(Scalar::as_f64).collect();
    let mean_hav = match hav {
        Some(h) => {
            let s = h.scores(x_w, attacked)?;
            Some(s.iter().sum::<f64>() / s.len().max(1) as f64)
        }
        None => None,
    };
    Ok(AttackReport {
        attack: attack.to_string(),
        budget: cfg.map(|c| c.linf_budget),
        steps: cfg.map(|c| c.steps),
        asr: asr(&scores, threshold)?,
        mean_hav,
    })
}
