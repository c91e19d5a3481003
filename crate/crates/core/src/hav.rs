//! Human-aligned variation score: rank targets, a Siamese scorer trained with
//! pairwise RankNet, footrule evaluation and the band filter.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use jigwm_autograd::{AdamW, Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_store, load_store, TensorRecord};
use crate::image::Image;
use crate::losses::{ranknet_loss_var, ranknet_prob_var};
use crate::nets::layers::Init;
use crate::nets::resnet::ResNet;
use crate::nets::ResNetConfig;
use crate::{Error, Result};

/// Variants per ranking group.
pub const VARIANTS: usize = 5;
/// Largest rank an annotator can assign.
pub const MAX_RANK: usize = VARIANTS - 1;

pub const HAV_FORMAT: u32 = 1;

/// An original, its five edited variants and one rank row per annotator
/// (0 = most similar to the original).
#[derive(Clone, Debug, PartialEq)]
pub struct RankingGroup<T: Scalar = f32> {
    pub original: Image<T>,
    pub variants: Vec<Image<T>>,
    pub ranks: Vec<Vec<usize>>,
}

impl<T: Scalar> RankingGroup<T> {
    pub fn new(original: Image<T>, variants: Vec<Image<T>>, ranks: Vec<Vec<usize>>) -> Result<Self> {
        if variants.len() != VARIANTS {
            return Err(Error::Contract(format!("{} variants, expected {VARIANTS}", variants.len())));
        }
        for v in &variants {
            original.same_shape(v)?;
        }
        validate_ranks(&ranks)?;
        Ok(Self { original, variants, ranks })
    }

    pub fn targets(&self) -> [f64; VARIANTS] {
        normalize_ranks(&self.ranks).expect("validated at construction")
    }
}

fn validate_ranks(ranks: &[Vec<usize>]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Contract("ranking group has no annotators".into()));
    }
    for row in ranks {
        let mut seen = [false; VARIANTS];
        if row.len() != VARIANTS {
            return Err(Error::Contract(format!("rank row {row:?} has length {}", row.len())));
        }
        for &r in row {
            if r > MAX_RANK || seen[r] {
                return Err(Error::Contract(format!("rank row {row:?} is not a permutation of 0..{MAX_RANK}")));
            }
            seen[r] = true;
        }
    }
    Ok(())
}

/// Per-variant mean over annotators of `rank / MAX_RANK`.
pub fn normalize_ranks(ranks: &[Vec<usize>]) -> Result<[f64; VARIANTS]> {
    validate_ranks(ranks)?;
    let mut out = [0.0; VARIANTS];
    for row in ranks {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r as f64 / MAX_RANK as f64;
        }
    }
    let n = ranks.len() as f64;
    Ok(out.map(|v| v / n))
}

/// `Σ |a(i) − b(i)|` over two rank vectors of the same permutation size.
pub fn spearman_footrule(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("rankings of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x.abs_diff(y)).sum::<usize>() as f64)
}

/// Rank position of each value when sorted ascending; ties keep index order.
pub fn ranking_of(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut rank = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HavConfig {
    pub backbone: ResNetConfig,
    /// Width of the hidden layer of the difference head.
    pub hidden: usize,
}

impl Default for HavConfig {
    fn default() -> Self {
        Self {
            backbone: ResNetConfig::default(),
            hidden: 256,
        }
    }
}

impl HavConfig {
    pub fn desk() -> Self {
        Self {
            backbone: ResNetConfig::desk(),
            hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("HAV head needs a hidden layer".into()));
        }
        Ok(())
    }
}

/// Least-squares map from raw scores onto rank targets, clamped to `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

impl Calibration {
    pub fn apply(&self, s: f64) -> f64 {
        (self.scale * s + self.offset).clamp(0.0, 1.0)
    }
}

/// Shared backbone `f`, then `1 − exp(−q(|f(o) − f(v)|))` with
/// `q(d) = softplus(w) · relu(U d)`. `q ≥ 0` and `q(0) = 0`, so identical
/// inputs score exactly zero and every score lies in `[0, 1)`.
#[derive(Clone, Debug)]
pub struct HavModel<T: Scalar = f32> {
    pub config: HavConfig,
    pub calibration: Option<Calibration>,
    params: ParamStore<T>,
    backbone: ResNet,
    proj: ParamId,
    out: ParamId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HavFile {
    format: u32,
    dtype: String,
    config: HavConfig,
    calibration: Option<Calibration>,
    params: Vec<TensorRecord>,
}

const SCORE_CHUNK: usize = 32;

impl<T: Scalar> HavModel<T> {
    pub fn new(config: HavConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let backbone = ResNet::new(&mut init, "hav.backbone", &config.backbone);
        let fdim = config.backbone.feature_dim();
        let proj = init.normal("hav.head.proj".into(), &[config.hidden, fdim], (2.0 / fdim as f64).sqrt());
        let out = init.zeros("hav.head.out".into(), &[1, config.hidden]);
        Ok(Self {
            config,
            calibration: None,
            params,
            backbone,
            proj,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Uncalibrated scores `[n, 1]` for batches of originals and variants.
    fn score_var<'g>(&self, p: &Bound<'g, T>, originals: Var<'g, T>, variants: Var<'g, T>) -> Var<'g, T> {
        let g = originals.graph();
        let n = originals.shape()[0];
        let f = self.backbone.features(p, g.cat_batch(&[originals, variants]));
        let d = f.slice_batch(0, n).sub(f.slice_batch(n, n)).abs();
        let q = d.matmul_t(p.var(self.proj)).relu().matmul_t(p.var(self.out).softplus());
        q.neg().exp().neg().add_scalar(T::one())
    }

    /// Raw scores, before calibration.
    pub fn raw_scores(&self, originals: &[Image<T>], variants: &[Image<T>]) -> Result<Vec<f64>> {
        if originals.len() != variants.len() {
            return Err(Error::Contract(format!("{} originals, {} variants", originals.len(), variants.len())));
        }
        for (o, v) in originals.iter().zip(variants) {
            o.same_shape(v)?;
        }
        let mut out = Vec::with_capacity(originals.len());
        for (o, v) in originals.chunks(SCORE_CHUNK).zip(variants.chunks(SCORE_CHUNK)) {
            if o.iter().any(|im| im.dims() != o[0].dims()) {
                out.extend(o.iter().zip(v).map(|(a, b)| self.raw_one(a, b)).collect::<Result<Vec<_>>>()?);
                continue;
            }
            let g = Graph::new();
            let p = self.params.bind(&g, false);
            let s = self.score_var(&p, g.constant(Image::batch(o)?), g.constant(Image::batch(v)?));
            out.extend(s.value().data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    fn raw_one(&self, o: &Image<T>, v: &Image<T>) -> Result<f64> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let s = self.score_var(&p, g.constant(o.to_tensor()), g.constant(v.to_tensor()));
        Ok(s.value().item().as_f64())
    }

    /// Calibrated scores when a calibration is fitted, raw scores otherwise.
    pub fn scores(&self, originals: &[Image<T>], variants: &[Image<T>]) -> Result<Vec<f64>> {
        let raw = self.raw_scores(originals, variants)?;
        Ok(match self.calibration {
            Some(c) => raw.into_iter().map(|s| c.apply(s)).collect(),
            None => raw,
        })
    }

    /// Fits the affine calibration against rank targets and stores it.
    pub fn calibrate(&mut self, groups: &[RankingGroup<T>]) -> Result<Calibration> {
        if groups.is_empty() {
            return Err(Error::Contract("calibration needs at least one group".into()));
        }
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for gr in groups {
            let originals = vec![gr.original.clone(); VARIANTS];
            xs.extend(self.raw_scores(&originals, &gr.variants)?);
            ys.extend(gr.targets());
        }
        let c = least_squares(&xs, &ys);
        self.calibration = Some(c);
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = HavFile {
            format: HAV_FORMAT,
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            calibration: self.calibration,
            params: encode_store(&self.params),
        };
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: HavFile = serde_json::from_slice(&bytes)?;
        if file.format != HAV_FORMAT {
            return Err(Error::Format(format!("HAV format {} unsupported", file.format)));
        }
        if file.dtype != T::DTYPE {
            return Err(Error::Format(format!("HAV model stored as {}, requested {}", file.dtype, T::DTYPE)));
        }
        let mut m = Self::new(file.config, 0)?;
        load_store(&mut m.params, &file.params)?;
        m.calibration = file.calibration;
        Ok(m)
    }
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Calibration {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Calibration {
        scale,
        offset: my - scale * mx,
    }
}

pub fn hav_score<T: Scalar>(original: &Image<T>, variant: &Image<T>, model: &HavModel<T>) -> Result<f64> {
    Ok(model.scores(std::slice::from_ref(original), std::slice::from_ref(variant))?[0])
}

/// Inclusive score band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HavBand {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HavBand {
    fn default() -> Self {
        Self { lo: 0.3, hi: 0.5 }
    }
}

impl HavBand {
    pub fn contains(&self, s: f64) -> bool {
        self.lo <= s && s <= self.hi
    }
}

/// Pairs whose score lies in `band`, with their scores, in input order.
pub fn hav_filter<T: Scalar>(
    pairs: &[(Image<T>, Image<T>)],
    model: &HavModel<T>,
    band: HavBand,
) -> Result<Vec<((Image<T>, Image<T>), f64)>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (o, v): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let scores = model.scores(&o, &v)?;
    Ok(pairs.iter().cloned().zip(scores).filter(|(_, s)| band.contains(*s)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HavTrainConfig {
    pub steps: usize,
    /// Pairs per step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HavTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// One training comparison: variants `i` and `j` of group `group`, with
/// `y = 1` when `i` has the higher mean rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankPair {
    pub group: usize,
    pub i: usize,
    pub j: usize,
    pub y: f64,
}

/// Draws `n` pairs; pairs with equal mean rank are redrawn and groups whose
/// mean ranks all coincide are never chosen.
pub fn sample_rank_pairs<T: Scalar, R: Rng + ?Sized>(groups: &[RankingGroup<T>], n: usize, rng: &mut R) -> Result<Vec<RankPair>> {
    let targets: Vec<[f64; VARIANTS]> = groups.iter().map(RankingGroup::targets).collect();
    let usable: Vec<usize> = (0..groups.len())
        .filter(|&g| targets[g].iter().any(|&t| t != targets[g][0]))
        .collect();
    if usable.is_empty() {
        return Err(Error::Contract("every ranking group is fully tied".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let g = usable[rng.random_range(0..usable.len())];
        let i = rng.random_range(0..VARIANTS);
        let j = rng.random_range(0..VARIANTS);
        let (ti, tj) = (targets[g][i], targets[g][j]);
        if ti == tj {
            continue;
        }
        out.push(RankPair {
            group: g,
            i,
            j,
            y: if ti > tj { 1.0 } else { 0.0 },
        });
    }
    Ok(out)
}

/// RankNet optimiser state for a [`HavModel`].
pub struct HavTrainer<T: Scalar = f32> {
    pub model: HavModel<T>,
    pub config: HavTrainConfig,
    opt: AdamW<T>,
}

impl<T: Scalar> HavTrainer<T> {
    pub fn new(model: HavModel<T>, config: HavTrainConfig) -> Self {
        let opt = AdamW::new(&model.params, T::lit(0.9), T::lit(0.999), T::lit(config.weight_decay));
        Self { model, config, opt }
    }

    /// One AdamW step on the given pairs; returns the loss before the update.
    pub fn step(&mut self, groups: &[RankingGroup<T>], pairs: &[RankPair]) -> Result<f64> {
        let first = &groups[pairs[0].group].original;
        let batch = |variant: fn(&RankPair) -> Option<usize>| -> Result<Tensor<T>> {
            let imgs: Vec<Image<T>> = pairs
                .iter()
                .map(|p| match variant(p) {
                    None => groups[p.group].original.clone(),
                    Some(k) => groups[p.group].variants[k].clone(),
                })
                .collect();
            for im in &imgs {
                first.same_shape(im)?;
            }
            Image::batch(&imgs)
        };
        let o = batch(|_| None)?;
        let vi = batch(|p| Some(p.i))?;
        let vj = batch(|p| Some(p.j))?;
        let y = Tensor::new(&[pairs.len(), 1], pairs.iter().map(|p| T::lit(p.y)).collect());

        let g = Graph::new();
        let p = self.model.params.bind(&g, true);
        let ov = g.constant(o);
        let n = pairs.len();
        let s = self.model.score_var(&p, g.cat_batch(&[ov, ov]), g.cat_batch(&[g.constant(vi), g.constant(vj)]));
        let loss = ranknet_loss_var(&y, ranknet_prob_var(s.slice_batch(0, n), s.slice_batch(n, n)));
        let value = loss.value().item().as_f64();
        let grads = p.grads(&g.backward(loss));
        if value.is_finite() && grads.iter().all(Tensor::all_finite) {
            self.opt.step(&mut self.model.params, &grads, T::lit(self.config.lr));
        }
        Ok(value)
    }

    /// Runs `config.steps` steps of freshly sampled pairs; returns the losses.
    pub fn fit(&mut self, groups: &[RankingGroup<T>]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        (0..self.config.steps)
            .map(|_| {
                let pairs = sample_rank_pairs(groups, self.config.batch, &mut rng)?;
                self.step(groups, &pairs)
            })
            .collect()
    }
}

pub fn train_hav<T: Scalar>(groups: &[RankingGroup<T>], model: HavConfig, train: HavTrainConfig) -> Result<HavModel<T>> {
    if groups.is_empty() {
        return Err(Error::Contract("HAV training needs at least one group".into()));
    }
    let mut tr = HavTrainer::new(HavModel::new(model, train.seed)?, train);
    tr.fit(groups)?;
    Ok(tr.model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HavEvaluation {
    pub groups: usize,
    pub mean_footrule: f64,
    /// Fraction of groups whose predicted order has footrule at most 2.
    pub within_two: f64,
}

/// Footrule between the model's ordering of each group's variants and the
/// ordering of their mean ranks.
pub fn evaluate_hav<T: Scalar>(model: &HavModel<T>, groups: &[RankingGroup<T>]) -> Result<HavEvaluation> {
    if groups.is_empty() {
        return Err(Error::Contract("evaluation needs at least one group".into()));
    }
    let mut total = 0.0;
    let mut close = 0usize;
    for gr in groups {
        let originals = vec![gr.original.clone(); VARIANTS];
        let predicted = ranking_of(&model.raw_scores(&originals, &gr.variants)?);
        let truth = ranking_of(&gr.targets());
        let d = spearman_footrule(&predicted, &truth)?;
        total += d;
        close += usize::from(d <= 2.0);
    }
    Ok(HavEvaluation {
        groups: groups.len(),
        mean_footrule: total / groups.len() as f64,
        within_two: close as f64 / groups.len() as f64,
    })
}

/// Noise levels of the synthetic ranking oracle, least to most severe.
pub const SYNTHETIC_NOISE_STDS: [f64; VARIANTS] = [0.01, 0.03, 0.06, 0.1, 0.15];

/// Groups whose variants are the original plus Gaussian noise at the five
/// synthetic levels, listed in random order. Every annotator ranks by noise
/// level.
pub fn synthetic_groups(n: usize, size: usize, annotators: usize, seed: u64) -> Vec<RankingGroup<f32>> {
    (0..n)
        .map(|k| {
            let s = crate::synth::item_seed(seed, k);
            let original = crate::synth::scene(size, size, s);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5EED);
            let mut order: Vec<usize> = (0..VARIANTS).collect();
            order.shuffle(&mut rng);
            let variants = order
                .iter()
                .map(|&lvl| {
                    let d = Normal::new(0.0, SYNTHETIC_NOISE_STDS[lvl]).expect("positive std");
                    let mut v = original.clone();
                    for x in v.data_mut() {
                        *x += d.sample(&mut rng) as f32;
                    }
                    v.clamp01()
                })
                .collect();
            RankingGroup::new(original, variants, vec![order; annotators.max(1)]).expect("well formed")
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupRecord {
    original: PathBuf,
    variants: Vec<PathBuf>,
    ranks: Vec<Vec<usize>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads one group per line; image paths are relative to the file.
pub fn load_ranking_groups(path: impl AsRef<Path>) -> Result<Vec<RankingGroup<f32>>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let original = Image::load_png(resolve(base, &rec.original))?;
        let variants = rec.variants.iter().map(|v| Image::load_png(resolve(base, v))).collect::<Result<_>>()?;
        out.push(RankingGroup::new(original, variants, rec.ranks)?);
    }
    Ok(out)
}

/// Writes PNGs into `dir` and a `groups.jsonl` index; returns the index path.
pub fn save_ranking_groups(dir: impl AsRef<Path>, groups: &[RankingGroup<f32>]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = dir.join("groups.jsonl");
    let mut f = std::fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    for (k, gr) in groups.iter().enumerate() {
        let original = PathBuf::from(format!("g{k:05}_o.png"));
        gr.original.save_png(dir.join(&original))?;
        let variants: Vec<PathBuf> = (0..VARIANTS).map(|i| PathBuf::from(format!("g{k:05}_v{i}.png"))).collect();
        for (v, p) in gr.variants.iter().zip(&variants) {
            v.save_png(dir.join(p))?;
        }
        let rec = GroupRecord {
            original,
            variants,
            ranks: gr.ranks.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&index, e))?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> HavConfig {
        HavConfig {
            backbone: ResNetConfig {
                channels: vec![4, 8],
                blocks_per_stage: 1,
                norm_groups: 2,
            },
            hidden: 8,
        }
    }

    #[test]
    fn rank_normalization() {
        assert_eq!(normalize_ranks(&[vec![0, 1, 2, 3, 4]]).unwrap(), [0.0, 0.25, 0.5, 0.75, 1.0]);
        let two = normalize_ranks(&[vec![0, 1, 2, 3, 4], vec![4, 1, 2, 3, 0]]).unwrap();
        assert_eq!(two[0], 0.5);
        let agree = normalize_ranks(&vec![vec![3, 1, 0, 4, 2]; 4]).unwrap();
        assert_eq!(agree, normalize_ranks(&[vec![3, 1, 0, 4, 2]]).unwrap());
        assert!(normalize_ranks(&[vec![0, 1, 2, 3, 3]]).is_err());
        assert!(normalize_ranks(&[vec![0, 1, 2, 3]]).is_err());
        assert!(normalize_ranks(&[vec![0, 1, 2, 3, 5]]).is_err());
        assert!(normalize_ranks(&[]).is_err());
    }

    #[test]
    fn footrule_examples() {
        assert_eq!(spearman_footrule(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(spearman_footrule(&[0, 1, 2, 3, 4], &[4, 3, 2, 1, 0]).unwrap(), 12.0);
        assert_eq!(spearman_footrule(&[0, 1, 2, 3, 4], &[0, 2, 1, 3, 4]).unwrap(), 2.0);
        assert!(spearman_footrule(&[0, 1], &[0, 1, 2]).is_err());
        assert_eq!(ranking_of(&[0.3, 0.1, 0.9, 0.2]), vec![2, 0, 3, 1]);
    }

    #[test]
    fn scores_bounded_and_zero_on_identity() {
        let m = HavModel::<f32>::new(tiny(), 3).unwrap();
        let a = crate::synth::corpus(4, 16, 16, 1);
        let b = crate::synth::corpus(4, 16, 16, 2);
        for s in m.raw_scores(&a, &b).unwrap() {
            assert!((0.0..=1.0).contains(&s));
        }
        for s in m.raw_scores(&a, &a).unwrap() {
            assert_eq!(s, 0.0);
        }
        assert!(m.raw_scores(&a[..1], &crate::synth::corpus(1, 8, 8, 1)).is_err());
    }

    #[test]
    fn tied_pairs_never_sampled() {
        let img = Image::<f32>::zeros(8, 8);
        let tied = RankingGroup::new(img.clone(), vec![img.clone(); 5], vec![vec![0, 1, 2, 3, 4], vec![4, 3, 2, 1, 0]]).unwrap();
        let partial = RankingGroup::new(img.clone(), vec![img.clone(); 5], vec![vec![0, 1, 2, 3, 4], vec![4, 1, 2, 3, 0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_rank_pairs(std::slice::from_ref(&tied), 4, &mut rng).is_err());
        let groups = [tied, partial];
        let t = groups[1].targets();
        for p in sample_rank_pairs(&groups, 500, &mut rng).unwrap() {
            assert_eq!(p.group, 1);
            assert_ne!(t[p.i], t[p.j]);
            assert_eq!(p.y == 1.0, t[p.i] > t[p.j]);
        }
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let groups: Vec<RankingGroup<f32>> = synthetic_groups(4, 16, 1, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_rank_pairs(&groups, 8, &mut rng).unwrap();
        let cfg = HavTrainConfig {
            lr: 3e-3,
            ..Default::default()
        };
        let mut tr = HavTrainer::new(HavModel::new(tiny(), 0).unwrap(), cfg);
        let losses: Vec<f64> = (0..100).map(|_| tr.step(&groups, &pairs).unwrap()).collect();
        assert!(losses[99] < losses[0] - 0.05, "{} -> {}", losses[0], losses[99]);
    }

    #[test]
    fn filter_band() {
        let m = HavModel::<f32>::new(tiny(), 3).unwrap();
        assert!(hav_filter(&[], &m, HavBand::default()).unwrap().is_empty());
        let a = crate::synth::corpus(3, 16, 16, 1);
        let b = crate::synth::corpus(3, 16, 16, 2);
        let pairs: Vec<_> = a.iter().cloned().zip(b).chain([(a[0].clone(), a[0].clone())]).collect();
        assert_eq!(hav_filter(&pairs, &m, HavBand { lo: 0.0, hi: 1.0 }).unwrap().len(), 4);
        let kept = hav_filter(&pairs, &m, HavBand::default()).unwrap();
        assert!(kept.iter().all(|(p, s)| HavBand::default().contains(*s) && p.0 != p.1));
    }

    #[test]
    fn calibration_is_least_squares() {
        let c = least_squares(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((c.scale - 2.0).abs() < 1e-12 && (c.offset - 1.0).abs() < 1e-12);
        assert_eq!(c.apply(10.0), 1.0);
        assert_eq!(least_squares(&[0.5, 0.5], &[0.2, 0.4]).apply(0.5), 0.30000000000000004);
    }

    #[test]
    fn persistence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let groups = synthetic_groups(2, 16, 2, 4);
        let index = save_ranking_groups(dir.path(), &groups).unwrap();
        let back = load_ranking_groups(&index).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].ranks, groups[1].ranks);
        assert!(back[0].original.max_abs_diff(&groups[0].original) <= 0.5 / 255.0 + 1e-6);

        let mut m = HavModel::<f32>::new(tiny(), 5).unwrap();
        m.calibrate(&back).unwrap();
        let p = dir.path().join("hav.json");
        m.save(&p).unwrap();
        let l = HavModel::<f32>::load(&p).unwrap();
        assert_eq!(l.calibration, m.calibration);
        let o = vec![back[0].original.clone(); 5];
        assert_eq!(l.scores(&o, &back[0].variants).unwrap(), m.scores(&o, &back[0].variants).unwrap());
        assert!(HavModel::<f64>::load(&p).is_err());
    }

    fn perm(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn footrule_is_a_metric(a in perm(6), b in perm(6), c in perm(6)) {
            let d = |x: &[usize], y: &[usize]| spearman_footrule(x, y).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &b) == 0.0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }
    }
}
