//! Contrastive training: sampling positives and negatives around a random
//! key, then one optimizer step for each network.

use std::io::Write;
use std::path::Path;

use jigwm_autograd::{AdamW, Graph, Scalar, Tensor, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::image::Image;
use crate::jigsaw::{perturb_key_with, random_key, random_wrong_key, JigsawKey};
use crate::losses::{visual_loss_var, watermark_loss_var, FilterBankPerceptual, LossWeights};
use crate::model::{KeyMaps, Model, ModelConfig};
use crate::perturb::{CurriculumSchedule, Perturber};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: OptimConfig,
    pub decoder: OptimConfig,
    pub encoder_batch: usize,
    /// Sub-batches per update seen by the decoder; only the first carries
    /// encoder gradients.
    pub decoder_accumulation: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub clip_percentile: f64,
    pub perturbed_instances: usize,
    /// Chance that the wrong key differs from the true key by a few swaps
    /// instead of being drawn at random.
    pub near_miss_probability: f64,
    pub near_miss_max_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: OptimConfig {
                lr: 1e-4,
                weight_decay: 0.02,
                betas: [0.9, 0.95],
            },
            decoder: OptimConfig {
                lr: 2e-4,
                weight_decay: 0.05,
                betas: [0.9, 0.95],
            },
            encoder_batch: 256,
            decoder_accumulation: 3,
            epochs: 100,
            warmup_epochs: 10,
            clip_percentile: 10.0,
            perturbed_instances: 3,
            near_miss_probability: 0.5,
            near_miss_max_pairs: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = positive(self.encoder.lr)
            && positive(self.decoder.lr)
            && self.encoder.weight_decay >= 0.0
            && self.decoder.weight_decay >= 0.0
            && self.encoder.betas.iter().chain(&self.decoder.betas).all(|b| (0.0..1.0).contains(b))
            && self.encoder_batch > 0
            && self.decoder_accumulation > 0
            && self.epochs > 0
            && self.warmup_epochs <= self.epochs
            && (0.0..=100.0).contains(&self.clip_percentile)
            && (0.0..=1.0).contains(&self.near_miss_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid training configuration".into()))
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub curriculum: CurriculumSchedule,
}


impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// CPU-scale setting: 64×64 images, a 4×4 grid and the analytic
    /// perturbations that survive at that resolution.
    pub fn desk() -> Self {
        use crate::perturb::Kind;
        let mut train = TrainConfig {
            encoder_batch: 16,
            decoder_accumulation: 1,
            perturbed_instances: 1,
            epochs: DESK_EPOCHS,
            warmup_epochs: 1,
            near_miss_probability: 1.0,
            near_miss_max_pairs: 1,
            ..TrainConfig::default()
        };
        train.encoder.lr = 5e-4;
        train.decoder.lr = 1e-3;
        Self {
            model: ModelConfig::desk(),
            train,
            loss: LossWeights {
                beta: 10.0,
                ..LossWeights::default()
            },
            curriculum: CurriculumSchedule {
                pixel_scale: 0.25,
                ..CurriculumSchedule::default()
            }
            .restricted(&[Kind::Jpeg, Kind::GaussianNoise, Kind::GaussianBlur, Kind::Mask, Kind::Contrast, Kind::Brightness]),
        }
    }

    /// Few-thousand-parameter networks on 16×16 images, for plumbing checks.
    pub fn smoke() -> Self {
        let mut model = ModelConfig::desk();
        model.encoder.base_channels = 4;
        model.encoder.max_channels = 8;
        model.encoder.unet_depth = 2;
        model.decoder.input_size = [16, 16];
        model.decoder.stages.truncate(2);
        Self {
            model,
            train: TrainConfig {
                encoder_batch: 2,
                decoder_accumulation: 2,
                epochs: 2,
                warmup_epochs: 1,
                perturbed_instances: 1,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const DESK_EPOCHS: usize = 16;

/// One step's sampled material. `x_p[i]` and `x_w_p[i]` are perturbed
/// instance `i` of the whole batch.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Scalar> {
    pub x: Tensor<T>,
    pub x_w: Tensor<T>,
    pub x_p: Vec<Tensor<T>>,
    pub x_w_p: Vec<Tensor<T>>,
    pub key: JigsawKey,
    pub wrong_key: JigsawKey,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positive samples per image: `x_w` and its perturbed copies.
    pub fn positives_per_image(&self) -> usize {
        1 + self.x_p.len()
    }

    /// Negatives per image: `x`, its perturbed copies, and wrong-key
    /// versions of every positive.
    pub fn negatives_per_image(&self) -> usize {
        2 * (1 + self.x_p.len())
    }
}

fn perturb_batch<T: Scalar>(
    x: &Tensor<T>,
    x_w: &Tensor<T>,
    perturber: &mut dyn Perturber<T>,
    instances: usize,
    progress: f64,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let xs = Image::unbatch(x);
    let ws = Image::unbatch(x_w);
    let out = perturber.perturb_pairs(&xs, &ws, instances, progress, seed)?;
    if out.len() != instances || out.iter().any(|inst| inst.len() != xs.len()) {
        return Err(Error::Contract("perturber returned the wrong number of pairs".into()));
    }
    let mut x_p = Vec::with_capacity(instances);
    let mut x_w_p = Vec::with_capacity(instances);
    for inst in out {
        let (a, b): (Vec<_>, Vec<_>) = inst.into_iter().unzip();
        x_p.push(Image::batch(&a)?);
        x_w_p.push(Image::batch(&b)?);
    }
    Ok((x_p, x_w_p))
}

/// Samples one contrastive batch without recording gradients.
pub fn build_contrastive_batch<T: Scalar>(
    x: &Tensor<T>,
    key: &JigsawKey,
    wrong_key: &JigsawKey,
    model: &Model<T>,
    perturber: &mut dyn Perturber<T>,
    instances: usize,
    progress: f64,
    seed: u64,
) -> Result<ContrastiveBatch<T>> {
    if key == wrong_key {
        return Err(Error::Contract("wrong key equals the true key".into()));
    }
    let x_w = model.embed_tensor(x, key)?;
    let (x_p, x_w_p) = perturb_batch(x, &x_w, perturber, instances, progress, seed)?;
    Ok(ContrastiveBatch {
        x: x.clone(),
        x_w,
        x_p,
        x_w_p,
        key: key.clone(),
        wrong_key: wrong_key.clone(),
    })
}

/// Decoder scores over a contrastive batch, split by role.
pub struct BranchScores<'g, T: Scalar> {
    /// `[D(S(x_w)); D(S(x_w_p_i))…]`
    pub positive: Var<'g, T>,
    /// `[D(S(x)); D(S(x_p_i))…; D(S_r(x_w)); D(S_r(x_w_p_i))…]`
    pub negative: Var<'g, T>,
}

/// Every branch except `D(S(x_w))` sees `x_w` detached, so encoder
/// gradients flow only through the correctly shuffled, unperturbed path.
pub fn branch_scores<'g, T: Scalar>(
    graph: &'g Graph<T>,
    model: &Model<T>,
    dec: &jigwm_autograd::Bound<'g, T>,
    x_w: Var<'g, T>,
    batch: &ContrastiveBatch<T>,
    maps: &KeyMaps,
    wrong: &KeyMaps,
) -> BranchScores<'g, T> {
    let n = batch.len();
    let c = |t: &Tensor<T>| graph.constant(t.clone());
    let mut true_inputs = vec![x_w];
    true_inputs.extend(batch.x_w_p.iter().map(c));
    true_inputs.push(c(&batch.x));
    true_inputs.extend(batch.x_p.iter().map(c));
    let mut wrong_inputs = vec![x_w.detach()];
    wrong_inputs.extend(batch.x_w_p.iter().map(c));
    let a = graph.cat_batch(&true_inputs).permute_pixels(maps.shuffle.clone());
    let b = graph.cat_batch(&wrong_inputs).permute_pixels(wrong.shuffle.clone());
    let scores = model.decoder.forward(dec, graph.cat_batch(&[a, b]));
    let n_pos = n * batch.positives_per_image();
    let n_neg = n * batch.negatives_per_image();
    BranchScores {
        positive: scores.slice_batch(0, n_pos),
        negative: scores.slice_batch(n_pos, n_neg),
    }
}

/// Linear-interpolated percentile of the history; `None` when empty.
pub fn autoclip_threshold(history: &[f64], percentile: f64) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut v = history.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = percentile.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Some(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// Learning-rate multiplier at fractional epoch `t`: linear warmup then
/// cosine decay to zero.
pub fn lr_factor(t: f64, warmup: usize, epochs: usize) -> f64 {
    let w = warmup as f64;
    if t < w {
        return t / w;
    }
    let span = (epochs as f64 - w).max(f64::MIN_POSITIVE);
    let p = ((t - w) / span).clamp(0.0, 1.0);
    0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_w")]
    pub l_w: f64,
    #[serde(rename = "L_v")]
    pub l_v: f64,
    /// Gradient-norm ceiling applied this step.
    pub clip: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub skipped: bool,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: RunConfig,
    pub(crate) enc_opt: AdamW<T>,
    pub(crate) dec_opt: AdamW<T>,
    pub(crate) clip_history: Vec<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub parent: Option<String>,
    perceptual: FilterBankPerceptual<T>,
}

fn optimizer<T: Scalar>(store: &jigwm_autograd::ParamStore<T>, c: &OptimConfig) -> AdamW<T> {
    AdamW::new(store, T::lit(c.betas[0]), T::lit(c.betas[1]), T::lit(c.weight_decay))
}

fn mix(seed: u64, a: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        Ok(Self::from_parts(model, config))
    }

    pub(crate) fn from_parts(model: Model<T>, config: RunConfig) -> Self {
        Self {
            enc_opt: optimizer(model.encoder.params(), &config.train.encoder),
            dec_opt: optimizer(model.decoder.params(), &config.train.decoder),
            model,
            config,
            clip_history: Vec::new(),
            epoch: 0,
            global_step: 0,
            parent: None,
            perceptual: FilterBankPerceptual::default(),
        }
    }

    pub fn clip_history(&self) -> &[f64] {
        &self.clip_history
    }

    /// Draws the step's key and wrong key.
    pub fn sample_keys(&self, seed: u64) -> Result<(JigsawKey, JigsawKey)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [r, c] = self.config.model.grid;
        let key = random_key((r, c), &mut rng)?;
        let t = &self.config.train;
        let max_pairs = t.near_miss_max_pairs.min(key.blocks() / 2);
        let wrong = if max_pairs > 0 && rng.random_bool(t.near_miss_probability) {
            let n = rng.random_range(1..=max_pairs);
            perturb_key_with(&key, n, &mut rng)?
        } else {
            random_wrong_key(&key, &mut rng)
        };
        Ok((key, wrong))
    }

    /// One update from `images`, split into at most `decoder_accumulation`
    /// sub-batches of `encoder_batch`.
    pub fn step(&mut self, images: &[Image<T>], perturber: &mut dyn Perturber<T>, lr_mult: f64, progress: f64, seed: u64) -> Result<StepRecord> {
        if images.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let t = self.config.train.clone();
        let (key, wrong_key) = self.sample_keys(mix(seed, 1))?;
        let (h, w) = self.config.model.resolution();
        let maps = KeyMaps::new(&key, h, w)?;
        let wrong = KeyMaps::new(&wrong_key, h, w)?;
        let subs: Vec<&[Image<T>]> = images.chunks(t.encoder_batch).take(t.decoder_accumulation).collect();
        let inv = T::lit(1.0 / subs.len() as f64);

        let mut enc_grads = Vec::new();
        let mut dec_grads: Option<Vec<Tensor<T>>> = None;
        let (mut l_w, mut l_v) = (0.0, 0.0);
        let (mut pos_sum, mut neg_sum, mut pos_n, mut neg_n) = (0.0, 0.0, 0usize, 0usize);
        for (j, sub) in subs.iter().enumerate() {
            let x = Image::batch(sub)?;
            let pseed = mix(seed, 100 + j as u64);
            let g = Graph::new();
            let dec = self.model.decoder.params().bind(&g, true);
            let enc = self.model.encoder.params().bind(&g, j == 0);
            let x_var = g.constant(x.clone());
            let x_w = if j == 0 {
                self.model.embed_var(&enc, x_var, &maps)?
            } else {
                g.constant(self.model.embed_tensor(&x, &key)?)
            };
            let (x_p, x_w_p) = perturb_batch(&x, &x_w.value(), perturber, t.perturbed_instances, progress, pseed)?;
            let batch = ContrastiveBatch {
                x,
                x_w: (*x_w.value()).clone(),
                x_p,
                x_w_p,
                key: key.clone(),
                wrong_key: wrong_key.clone(),
            };
            let s = branch_scores(&g, &self.model, &dec, x_w, &batch, &maps, &wrong);
            let lw = watermark_loss_var(s.positive, s.negative, &self.config.loss);
            let loss = if j == 0 {
                let lv = visual_loss_var(x_var, x_w, &self.config.loss, &self.perceptual);
                l_v = lv.value().item().as_f64();
                lw.add(lv)
            } else {
                lw
            };
            l_w += lw.value().item().as_f64() / subs.len() as f64;
            for v in s.positive.value().data() {
                pos_sum += v.as_f64();
                pos_n += 1;
            }
            for v in s.negative.value().data() {
                neg_sum += v.as_f64();
                neg_n += 1;
            }
            if !loss.value().item().is_finite() {
                break;
            }
            let grads = g.backward(loss);
            if j == 0 {
                enc_grads = enc.grads(&grads);
            }
            let mut d = dec.grads(&grads);
            for t in &mut d {
                t.scale_inplace(inv);
            }
            match &mut dec_grads {
                None => dec_grads = Some(d),
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| a.add_assign(b)),
            }
        }

        let lr = t.encoder.lr * lr_mult;
        let mut record = StepRecord {
            epoch: self.epoch,
            step: self.global_step,
            l_w,
            l_v,
            clip: f64::NAN,
            lr,
            grad_norm: f64::NAN,
            mean_pos: pos_sum / pos_n.max(1) as f64,
            mean_neg: neg_sum / neg_n.max(1) as f64,
            skipped: false,
        };
        self.global_step += 1;
        let finite = (l_w + l_v).is_finite()
            && dec_grads.as_ref().is_some_and(|d| d.iter().all(Tensor::all_finite))
            && enc_grads.iter().all(Tensor::all_finite)
            && !enc_grads.is_empty();
        if !finite {
            warn!("step {}: non-finite loss or gradient, skipped", record.step);
            record.skipped = true;
            return Ok(record);
        }
        let mut dec_grads = dec_grads.expect("checked above");
        let sq: f64 = enc_grads.iter().chain(&dec_grads).map(|g| g.sq_norm().as_f64()).sum();
        let norm = sq.sqrt();
        self.clip_history.push(norm);
        let clip = autoclip_threshold(&self.clip_history, t.clip_percentile).unwrap_or(norm);
        if norm > clip && norm > 0.0 {
            let s = T::lit(clip / norm);
            for g in enc_grads.iter_mut().chain(dec_grads.iter_mut()) {
                g.scale_inplace(s);
            }
        }
        record.grad_norm = norm;
        record.clip = clip;
        self.enc_opt.step(self.model.encoder.params_mut(), &enc_grads, T::lit(lr));
        self.dec_opt.step(self.model.decoder.params_mut(), &dec_grads, T::lit(t.decoder.lr * lr_mult));
        Ok(record)
    }

    /// Images consumed per update.
    pub fn images_per_step(&self) -> usize {
        self.config.train.encoder_batch * self.config.train.decoder_accumulation
    }

    /// Runs the remaining epochs. With `out_dir`, appends step records to
    /// `train_log.jsonl` and rewrites `checkpoint.json` after every epoch.
    pub fn fit(&mut self, dataset: &[Image<T>], perturber: &mut dyn Perturber<T>, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        self.fit_until(dataset, perturber, out_dir, self.config.train.epochs)
    }

    /// [`fit`](Self::fit), stopping once `stop_epoch` epochs are complete.
    pub fn fit_until(
        &mut self,
        dataset: &[Image<T>],
        perturber: &mut dyn Perturber<T>,
        out_dir: Option<&Path>,
        stop_epoch: usize,
    ) -> Result<Vec<StepRecord>> {
        if dataset.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        let t = self.config.train.clone();
        let per = self.images_per_step().min(dataset.len());
        let steps = (dataset.len() / per).max(1);
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train_log.jsonl");
                Some((std::fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.epoch < t.epochs.min(stop_epoch) {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(t.seed, 0xE90C + self.epoch as u64)));
            for s in 0..steps {
                let pos = self.epoch as f64 + s as f64 / steps as f64;
                let batch: Vec<Image<T>> = order[s * per..(s + 1) * per].iter().map(|&i| dataset[i].clone()).collect();
                let seed = mix(t.seed, self.global_step);
                let rec = self.step(&batch, perturber, lr_factor(pos, t.warmup_epochs, t.epochs), pos / t.epochs as f64, seed)?;
                if let Some((f, p)) = &mut log {
                    writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(p.as_path(), e))?;
                }
                records.push(rec);
            }
            self.epoch += 1;
            if let Some(last) = records.last() {
                info!(
                    "epoch {}/{}: L_w {:.4} L_v {:.4} pos {:.3} neg {:.3}",
                    self.epoch, t.epochs, last.l_w, last.l_v, last.mean_pos, last.mean_neg
                );
            }
            if let Some(dir) = out_dir {
                Checkpoint::capture(self).save(dir.join("checkpoint.json"))?;
            }
        }
        Ok(records)
    }

    /// Further steps against a new perturbation source at a constant
    /// learning-rate multiplier. The result records this checkpoint as its
    /// parent.
    pub fn finetune(
        &mut self,
        dataset: &[Image<T>],
        perturber: &mut dyn Perturber<T>,
        steps: usize,
        lr_mult: f64,
    ) -> Result<Vec<StepRecord>> {
        if dataset.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        self.parent = Some(Checkpoint::capture(self).id);
        let per = self.images_per_step().min(dataset.len());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.train.seed, 0xF17E ^ self.global_step));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut cursor = dataset.len();
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            if cursor + per > dataset.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch: Vec<Image<T>> = order[cursor..cursor + per].iter().map(|&i| dataset[i].clone()).collect();
            cursor += per;
            let seed = rng.random();
            records.push(self.step(&batch, perturber, lr_mult, 1.0, seed)?);
        }
        Ok(records)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::perturb::NoPerturbation;
    use crate::synth;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig::smoke()
    }

    #[test]
    fn autoclip_percentiles() {
        let h: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((autoclip_threshold(&h, 10.0).unwrap() - 10.9).abs() < 1e-12);
        assert_eq!(autoclip_threshold(&[2.5; 7], 10.0), Some(2.5));
        assert_eq!(autoclip_threshold(&[4.0], 10.0), Some(4.0));
        assert_eq!(autoclip_threshold(&[], 10.0), None);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_factor(0.0, 10, 100), 0.0);
        assert!((lr_factor(10.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!(lr_factor(100.0, 10, 100).abs() < 1e-12);
        assert!((lr_factor(5.0, 10, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn category_counts() {
        let cfg = tiny_config();
        let model = Model::<f32>::new(cfg.model.clone(), 0).unwrap();
        let x = Image::batch(&synth::corpus(2, 16, 16, 1)).unwrap();
        let tr = Trainer::<f32>::new(cfg).unwrap();
        let (k, kr) = tr.sample_keys(3).unwrap();
        let b = build_contrastive_batch(&x, &k, &kr, &model, &mut NoPerturbation, 3, 0.0, 0).unwrap();
        assert_eq!(b.positives_per_image(), 4);
        assert_eq!(b.negatives_per_image(), 8);
        assert_ne!(b.key, b.wrong_key);
        // identity encoder and perturbation
        assert!(b.x_w.data().iter().zip(b.x.data()).all(|(a, c)| (a - c).abs() < 1e-6));
        assert_eq!(b.x_w_p[2], b.x_w);
        assert!(build_contrastive_batch(&x, &k, &k, &model, &mut NoPerturbation, 1, 0.0, 0).is_err());
    }

    #[test]
    fn step_reports_finite_losses_and_moves_parameters() {
        let mut tr = Trainer::<f32>::new(tiny_config()).unwrap();
        let before = tr.model.decoder.params().values()[0].clone();
        let imgs = synth::corpus(4, 16, 16, 2);
        let rec = tr.step(&imgs, &mut NoPerturbation, 1.0, 0.0, 5).unwrap();
        assert!(!rec.skipped);
        assert!(rec.l_w.is_finite() && rec.l_v >= 0.0);
        assert!(rec.clip <= rec.grad_norm + 1e-12);
        assert_ne!(tr.model.decoder.params().values()[0], before);
    }

    #[test]
    fn frozen_encoder_decoder_overfits_fixed_batch() {
        let mut cfg = tiny_config();
        cfg.train.clip_percentile = 100.0;
        cfg.train.decoder.lr = 5e-4;
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let imgs: Vec<Image<f64>> = synth::corpus(2, 16, 16, 4).iter().map(|i| i.cast()).collect();
        let x = Image::batch(&imgs).unwrap();
        let (k, kr) = tr.sample_keys(1).unwrap();
        // A fixed watermark: the encoder never updates.
        let b = build_contrastive_batch(&x, &k, &kr, &tr.model, &mut NoPerturbation, 1, 0.0, 0).unwrap();
        let mut xw = b.x_w.clone();
        xw.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (*v + 0.05 * ((i % 7) as f64 - 3.0) / 3.0).clamp(0.0, 1.0));
        let b = ContrastiveBatch { x_w_p: vec![xw.clone()], x_w: xw, ..b };
        let (h, w) = tr.config.model.resolution();
        let (maps, wrong) = (KeyMaps::new(&k, h, w).unwrap(), KeyMaps::new(&kr, h, w).unwrap());
        let mut losses = Vec::new();
        for _ in 0..50 {
            let g = Graph::new();
            let dec = tr.model.decoder.params().bind(&g, true);
            let s = branch_scores(&g, &tr.model, &dec, g.constant(b.x_w.clone()), &b, &maps, &wrong);
            let loss = watermark_loss_var(s.positive, s.negative, &tr.config.loss);
            losses.push(loss.value().item());
            let grads = dec.grads(&g.backward(loss));
            tr.dec_opt.step(tr.model.decoder.params_mut(), &grads, 5e-4);
        }
        assert!(losses[49] < losses[0] * 0.5, "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synth::corpus(8, 16, 16, 9);
        let run = |out: Option<&Path>| {
            let mut tr = Trainer::<f32>::new(tiny_config()).unwrap();
            tr.fit(&imgs, &mut NoPerturbation, out).unwrap()
        };
        let a = run(Some(dir.path()));
        let b = run(None);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 4);
        let ck = Checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(ck.epoch, 2);
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for k in ["epoch", "step", "L_w", "L_v", "clip", "lr"] {
            assert!(first.get(k).is_some(), "{k}");
        }
    }
}
