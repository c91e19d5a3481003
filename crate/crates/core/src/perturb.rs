//! Analytic image perturbations and the training curriculum over their
//! strength.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use jigwm_autograd::Scalar;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{Image, CHANNELS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Jpeg,
    GaussianNoise,
    GaussianBlur,
    RandomRotate,
    Mask,
    CropResize,
    Contrast,
    Brightness,
    Oracle,
}

impl Kind {
    pub const ANALYTIC: [Kind; 8] = [
        Kind::Jpeg,
        Kind::GaussianNoise,
        Kind::GaussianBlur,
        Kind::RandomRotate,
        Kind::Mask,
        Kind::CropResize,
        Kind::Contrast,
        Kind::Brightness,
    ];
}

/// One perturbation with its parameters.
///
/// `Contrast` and `Brightness` carry a jitter magnitude `m`: the applied
/// multiplier is drawn uniformly from `[max(0, 1 − m), 1 + m]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    Jpeg { quality: u8 },
    GaussianNoise { mean: f64, std: f64 },
    GaussianBlur { kernel: usize, sigma: f64 },
    RandomRotate { probability: f64 },
    /// Zero-filled square of side `size` pixels.
    Mask { size: usize },
    /// Square crop with side `ratio · min(h, w)`, resized back.
    CropResize { ratio: f64, centered: bool },
    Contrast { factor: f64 },
    Brightness { value: f64 },
    Oracle { instruction: String },
}

impl PerturbationSpec {
    pub fn kind(&self) -> Kind {
        match self {
            PerturbationSpec::Jpeg { .. } => Kind::Jpeg,
            PerturbationSpec::GaussianNoise { .. } => Kind::GaussianNoise,
            PerturbationSpec::GaussianBlur { .. } => Kind::GaussianBlur,
            PerturbationSpec::RandomRotate { .. } => Kind::RandomRotate,
            PerturbationSpec::Mask { .. } => Kind::Mask,
            PerturbationSpec::CropResize { .. } => Kind::CropResize,
            PerturbationSpec::Contrast { .. } => Kind::Contrast,
            PerturbationSpec::Brightness { .. } => Kind::Brightness,
            PerturbationSpec::Oracle { .. } => Kind::Oracle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PerturbationSpec::Jpeg { quality } => (1..=100).contains(&quality),
            PerturbationSpec::GaussianNoise { mean, std } => mean.is_finite() && std >= 0.0,
            PerturbationSpec::GaussianBlur { kernel, sigma } => kernel % 2 == 1 && sigma > 0.0,
            PerturbationSpec::RandomRotate { probability } => (0.0..=1.0).contains(&probability),
            PerturbationSpec::Mask { .. } => true,
            PerturbationSpec::CropResize { ratio, .. } => ratio > 0.0 && ratio <= 1.0,
            PerturbationSpec::Contrast { factor } => factor >= 0.0,
            PerturbationSpec::Brightness { value } => value >= 0.0,
            PerturbationSpec::Oracle { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid perturbation parameters: {self}")))
        }
    }

    /// Compact label, also accepted by [`FromStr`].
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationSpec::Jpeg { quality } => write!(f, "jpeg:{quality}"),
            PerturbationSpec::GaussianNoise { mean, std } => write!(f, "noise:{std}:{mean}"),
            PerturbationSpec::GaussianBlur { kernel, sigma } => write!(f, "blur:{kernel}:{sigma}"),
            PerturbationSpec::RandomRotate { probability } => write!(f, "rotate:{probability}"),
            PerturbationSpec::Mask { size } => write!(f, "mask:{size}"),
            PerturbationSpec::CropResize { ratio, centered } => {
                write!(f, "crop:{ratio}{}", if *centered { "" } else { ":random" })
            }
            PerturbationSpec::Contrast { factor } => write!(f, "contrast:{factor}"),
            PerturbationSpec::Brightness { value } => write!(f, "brightness:{value}"),
            PerturbationSpec::Oracle { instruction } => write!(f, "oracle:{instruction}"),
        }
    }
}

impl FromStr for PerturbationSpec {
    type Err = Error;

    /// `jpeg:Q`, `noise:STD[:MEAN]`, `blur:K:SIGMA`, `rotate:P`, `mask:PX`,
    /// `crop:RATIO[:random]`, `contrast:M`, `brightness:M`, `oracle:TEXT`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse perturbation {s:?}"));
        let (name, rest) = s.split_once(':').ok_or_else(bad)?;
        if name == "oracle" {
            return Ok(PerturbationSpec::Oracle { instruction: rest.to_string() });
        }
        let parts: Vec<&str> = rest.split(':').collect();
        let num = |i: usize| -> Result<f64> { parts.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
        let spec = match name {
            "jpeg" => PerturbationSpec::Jpeg { quality: parts[0].parse().map_err(|_| bad())? },
            "noise" => PerturbationSpec::GaussianNoise {
                std: num(0)?,
                mean: if parts.len() > 1 { num(1)? } else { 0.0 },
            },
            "blur" => PerturbationSpec::GaussianBlur {
                kernel: parts[0].parse().map_err(|_| bad())?,
                sigma: num(1)?,
            },
            "rotate" => PerturbationSpec::RandomRotate { probability: num(0)? },
            "mask" => PerturbationSpec::Mask { size: parts[0].parse().map_err(|_| bad())? },
            "crop" => PerturbationSpec::CropResize {
                ratio: num(0)?,
                centered: parts.get(1) != Some(&"random"),
            },
            "contrast" => PerturbationSpec::Contrast { factor: num(0)? },
            "brightness" => PerturbationSpec::Brightness { value: num(0)? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies one analytic perturbation. Deterministic in `seed`; the result is
/// clamped to `[0, 1]`.
pub fn apply_perturbation<T: Scalar>(spec: &PerturbationSpec, img: &Image<T>, seed: u64) -> Result<Image<T>> {
    spec.validate()?;
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::Dimension("empty image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match *spec {
        PerturbationSpec::Jpeg { quality } => jpeg(img, quality)?,
        PerturbationSpec::GaussianNoise { mean, std } => {
            if std == 0.0 {
                img.map(|v| v + T::lit(mean))
            } else {
                let n = Normal::new(mean, std).expect("valid normal");
                let data = img.data().iter().map(|&v| v + T::lit(n.sample(&mut rng))).collect();
                Image::new(img.height(), img.width(), data)?
            }
        }
        PerturbationSpec::GaussianBlur { kernel, sigma } => gaussian_blur(img, kernel, sigma),
        PerturbationSpec::RandomRotate { probability } => {
            if rng.random_bool(probability) {
                flip(img, rng.random_bool(0.5))
            } else {
                img.clone()
            }
        }
        PerturbationSpec::Mask { size } => {
            let (h, w) = img.dims();
            let (sh, sw) = (size.min(h), size.min(w));
            let top = rng.random_range(0..=h - sh);
            let left = rng.random_range(0..=w - sw);
            let mut out = img.clone();
            for c in 0..CHANNELS {
                for y in top..top + sh {
                    for x in left..left + sw {
                        out.set(c, y, x, T::zero());
                    }
                }
            }
            out
        }
        PerturbationSpec::CropResize { ratio, centered } => {
            let (h, w) = img.dims();
            let side = ((ratio * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
            let (top, left) = if centered {
                ((h - side) / 2, (w - side) / 2)
            } else {
                (rng.random_range(0..=h - side), rng.random_range(0..=w - side))
            };
            img.crop(top, left, side, side).resize(h, w)
        }
        PerturbationSpec::Contrast { factor } => {
            let m = jitter(&mut rng, factor);
            let gray = luminance_mean(img);
            img.map(|v| gray + (v - gray) * T::lit(m))
        }
        PerturbationSpec::Brightness { value } => {
            let m = jitter(&mut rng, value);
            img.map(|v| v * T::lit(m))
        }
        PerturbationSpec::Oracle { .. } => {
            return Err(Error::Config("oracle perturbation requires a configured oracle endpoint".into()))
        }
    };
    Ok(out.clamp01())
}

/// Applies a chain in order, deriving one seed per link.
pub fn apply_chain<T: Scalar>(chain: &[PerturbationSpec], img: &Image<T>, seed: u64) -> Result<Image<T>> {
    let mut out = img.clone();
    for (i, spec) in chain.iter().enumerate() {
        out = apply_perturbation(spec, &out, seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
    }
    Ok(out)
}

fn jitter<R: Rng>(rng: &mut R, m: f64) -> f64 {
    let lo = (1.0 - m).max(0.0);
    let hi = 1.0 + m;
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        1.0
    }
}

fn luminance_mean<T: Scalar>(img: &Image<T>) -> T {
    let plane = img.plane();
    let w = [0.299, 0.587, 0.114];
    let s: f64 = (0..CHANNELS)
        .map(|c| w[c] * img.data()[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>())
        .sum();
    T::lit(s / plane as f64)
}

fn jpeg<T: Scalar>(img: &Image<T>, quality: u8) -> Result<Image<T>> {
    let mut buf = Vec::new();
    let rgb = img.to_rgb8();
    JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    Image::decode(&buf)
}

fn flip<T: Scalar>(img: &Image<T>, horizontal: bool) -> Image<T> {
    let (h, w) = img.dims();
    Image::from_fn(h, w, |c, y, x| if horizontal { img.get(c, y, w - 1 - x) } else { img.get(c, h - 1 - y, x) })
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
fn gaussian_blur<T: Scalar>(img: &Image<T>, kernel: usize, sigma: f64) -> Image<T> {
    let taps = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as isize;
    let (h, w) = img.dims();
    let rows = Image::from_fn(h, w, |c, y, x| {
        let s: f64 = taps
            .iter()
            .enumerate()
            .map(|(k, &t)| t * img.get(c, y, reflect(x as isize + k as isize - r, w)).as_f64())
            .sum();
        T::lit(s)
    });
    Image::from_fn(h, w, |c, y, x| {
        let s: f64 = taps
            .iter()
            .enumerate()
            .map(|(k, &t)| t * rows.get(c, reflect(y as isize + k as isize - r, h), x).as_f64())
            .sum();
        T::lit(s)
    })
}

/// Linear interpolation of a parameter interval between two endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumEntry {
    pub kind: Kind,
    pub min_range: [f64; 2],
    pub max_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub entries: Vec<CurriculumEntry>,
    pub total_epochs: usize,
    /// Multiplier from the tabulated pixel sizes to the working resolution.
    pub pixel_scale: f64,
    pub blur_kernel: usize,
    pub max_chain: usize,
}

impl Default for CurriculumSchedule {
    /// Full training bank: every analytic kind.
    fn default() -> Self {
        let e = |kind, min_range, max_range| CurriculumEntry { kind, min_range, max_range };
        Self {
            entries: vec![
                e(Kind::Jpeg, [10.0, 30.0], [20.0, 90.0]),
                e(Kind::Mask, [25.0, 65.0], [80.0, 200.0]),
                e(Kind::CropResize, [0.9, 0.8], [0.7, 0.3]),
                e(Kind::RandomRotate, [0.5, 0.5], [0.5, 0.5]),
                e(Kind::Contrast, [0.16, 0.3], [0.8, 1.5]),
                e(Kind::Brightness, [0.0, 0.1], [0.0, 0.25]),
                e(Kind::GaussianBlur, [0.1, 0.5], [0.3, 1.5]),
                e(Kind::GaussianNoise, [0.01, 0.05], [0.05, 0.15]),
            ],
            total_epochs: 100,
            pixel_scale: 1.0,
            blur_kernel: 7,
            max_chain: 3,
        }
    }
}

impl CurriculumSchedule {
    /// Keeps only the listed kinds.
    pub fn restricted(mut self, kinds: &[Kind]) -> Self {
        self.entries.retain(|e| kinds.contains(&e.kind));
        self
    }

    /// Interval of `kind` at training fraction `t ∈ [0, 1]`.
    pub fn range_at_fraction(&self, kind: Kind, t: f64) -> Option<[f64; 2]> {
        let t = t.clamp(0.0, 1.0);
        self.entries.iter().find(|e| e.kind == kind).map(|e| {
            [
                e.min_range[0] + t * (e.max_range[0] - e.min_range[0]),
                e.min_range[1] + t * (e.max_range[1] - e.min_range[1]),
            ]
        })
    }

    pub fn range_at(&self, kind: Kind, epoch: usize) -> Option<[f64; 2]> {
        self.range_at_fraction(kind, self.fraction(epoch))
    }

    pub fn fraction(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            1.0
        } else {
            epoch as f64 / self.total_epochs as f64
        }
    }

    fn draw<R: Rng>(&self, kind: Kind, t: f64, rng: &mut R) -> PerturbationSpec {
        let [a, b] = self.range_at_fraction(kind, t).expect("kind present");
        let (lo, hi) = (a.min(b), a.max(b));
        let u = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        match kind {
            Kind::Jpeg => PerturbationSpec::Jpeg { quality: u.round().clamp(1.0, 100.0) as u8 },
            Kind::GaussianNoise => PerturbationSpec::GaussianNoise { mean: 0.0, std: u },
            Kind::GaussianBlur => PerturbationSpec::GaussianBlur {
                kernel: self.blur_kernel,
                sigma: u.max(1e-3),
            },
            Kind::RandomRotate => PerturbationSpec::RandomRotate { probability: u.clamp(0.0, 1.0) },
            Kind::Mask => PerturbationSpec::Mask { size: (u * self.pixel_scale).round() as usize },
            Kind::CropResize => PerturbationSpec::CropResize { ratio: u, centered: true },
            Kind::Contrast => PerturbationSpec::Contrast { factor: u },
            Kind::Brightness => PerturbationSpec::Brightness { value: u },
            Kind::Oracle => unreachable!("oracle kinds are not scheduled"),
        }
    }

    /// `1..=max_chain` distinct kinds, each with parameters drawn uniformly
    /// from its interval at `epoch`.
    pub fn sample_chain(&self, epoch: usize, seed: u64) -> Vec<PerturbationSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_chain_with(self.fraction(epoch), &mut rng)
    }

    pub fn sample_chain_with<R: Rng>(&self, t: f64, rng: &mut R) -> Vec<PerturbationSpec> {
        let n = self.entries.len();
        if n == 0 {
            return Vec::new();
        }
        let len = rng.random_range(1..=self.max_chain.clamp(1, n));
        index::sample(rng, n, len)
            .into_iter()
            .map(|i| self.draw(self.entries[i].kind, t, rng))
            .collect()
    }
}

/// Evaluation settings for the six conventional perturbation families.
pub fn type1_eval_suite() -> Vec<PerturbationSpec> {
    vec![
        PerturbationSpec::Jpeg { quality: 90 },
        PerturbationSpec::RandomRotate { probability: 0.5 },
        PerturbationSpec::Contrast { factor: 1.0 },
        PerturbationSpec::Brightness { value: 0.2 },
        PerturbationSpec::GaussianBlur { kernel: 5, sigma: 0.3 },
        PerturbationSpec::GaussianNoise { mean: 0.0, std: 0.03 },
    ]
}

/// Source of perturbed training pairs. Both members of a pair receive the
/// same perturbation.
pub trait Perturber<T: Scalar> {
    /// `out[i][j]` is instance `i` of pair `j`. `progress ∈ [0, 1]` is the
    /// training fraction.
    fn perturb_pairs(
        &mut self,
        x: &[Image<T>],
        x_w: &[Image<T>],
        instances: usize,
        progress: f64,
        seed: u64,
    ) -> Result<Vec<Vec<(Image<T>, Image<T>)>>>;

    fn describe(&self) -> String;
}

/// Leaves every pair untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoPerturbation;

impl<T: Scalar> Perturber<T> for NoPerturbation {
    fn perturb_pairs(
        &mut self,
        x: &[Image<T>],
        x_w: &[Image<T>],
        instances: usize,
        _progress: f64,
        _seed: u64,
    ) -> Result<Vec<Vec<(Image<T>, Image<T>)>>> {
        let pairs: Vec<_> = x.iter().cloned().zip(x_w.iter().cloned()).collect();
        Ok(vec![pairs; instances])
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Random analytic chains drawn from a curriculum.
#[derive(Clone, Debug)]
pub struct AnalyticPerturber {
    pub curriculum: CurriculumSchedule,
}

impl<T: Scalar> Perturber<T> for AnalyticPerturber {
    fn perturb_pairs(
        &mut self,
        x: &[Image<T>],
        x_w: &[Image<T>],
        instances: usize,
        progress: f64,
        seed: u64,
    ) -> Result<Vec<Vec<(Image<T>, Image<T>)>>> {
        if x.len() != x_w.len() {
            return Err(Error::Dimension(format!("{} originals vs {} watermarked", x.len(), x_w.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..instances)
            .map(|_| {
                x.iter()
                    .zip(x_w)
                    .map(|(a, b)| {
                        let chain = self.curriculum.sample_chain_with(progress, &mut rng);
                        let s: u64 = rng.random();
                        Ok((apply_chain(&chain, a, s)?, apply_chain(&chain, b, s)?))
                    })
                    .collect()
            })
            .collect()
    }

    fn describe(&self) -> String {
        let kinds: Vec<String> = self.curriculum.entries.iter().map(|e| format!("{:?}", e.kind)).collect();
        format!("analytic[{}]", kinds.join(","))
    }
}

/// A single fixed perturbation, e.g. one held-out evaluation setting.
#[derive(Clone, Debug)]
pub struct FixedPerturber(pub Vec<PerturbationSpec>);

impl<T: Scalar> Perturber<T> for FixedPerturber {
    fn perturb_pairs(
        &mut self,
        x: &[Image<T>],
        x_w: &[Image<T>],
        instances: usize,
        _progress: f64,
        seed: u64,
    ) -> Result<Vec<Vec<(Image<T>, Image<T>)>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..instances)
            .map(|_| {
                x.iter()
                    .zip(x_w)
                    .map(|(a, b)| {
                        let s: u64 = rng.random();
                        Ok((apply_chain(&self.0, a, s)?, apply_chain(&self.0, b, s)?))
                    })
                    .collect()
            })
            .collect()
    }

    fn describe(&self) -> String {
        self.0.iter().map(|s| s.label()).collect::<Vec<_>>().join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Image<f64> {
        Image::from_fn(32, 32, |c, y, x| 0.5 + 0.35 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.25).cos()))
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = scene();
        let out = apply_perturbation(&PerturbationSpec::GaussianNoise { mean: 0.0, std: 0.0 }, &img, 1).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn jpeg_90_is_close_but_not_equal() {
        let img: Image<f64> = Image::from_rgb8(&scene().to_rgb8());
        let out = apply_perturbation(&PerturbationSpec::Jpeg { quality: 90 }, &img, 0).unwrap();
        assert_ne!(out, img);
        assert!(out.mean_abs_diff(&img) < 0.02);
    }

    #[test]
    fn blur_of_delta_matches_direct_convolution() {
        let mut delta = Image::<f64>::zeros(11, 11);
        for c in 0..3 {
            delta.set(c, 5, 5, 1.0);
        }
        let out = apply_perturbation(&PerturbationSpec::GaussianBlur { kernel: 5, sigma: 0.3 }, &delta, 0).unwrap();
        let norm: f64 = (-2i32..=2)
            .flat_map(|dy| (-2i32..=2).map(move |dx| (dx, dy)))
            .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * 0.09)).exp())
            .sum();
        for y in 0..11 {
            for x in 0..11 {
                let (dy, dx) = (y as i32 - 5, x as i32 - 5);
                let want = if dy.abs() <= 2 && dx.abs() <= 2 {
                    (-((dx * dx + dy * dy) as f64) / (2.0 * 0.09)).exp() / norm
                } else {
                    0.0
                };
                assert!((out.get(1, y, x) - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn mask_blacks_out_exact_square() {
        let img = Image::<f64>::filled(20, 20, 0.7);
        let out = apply_perturbation(&PerturbationSpec::Mask { size: 6 }, &img, 4).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 3 * 36);
        assert_eq!(out.data().iter().filter(|&&v| v == 0.7).count(), 3 * (400 - 36));
    }

    #[test]
    fn rotate_with_zero_probability_is_identity() {
        let img = scene();
        assert_eq!(apply_perturbation(&PerturbationSpec::RandomRotate { probability: 0.0 }, &img, 9).unwrap(), img);
        let flipped = apply_perturbation(&PerturbationSpec::RandomRotate { probability: 1.0 }, &img, 9).unwrap();
        let h = flip(&img, true);
        let v = flip(&img, false);
        assert!(flipped == h || flipped == v);
    }

    #[test]
    fn outputs_stay_in_range_and_keep_size() {
        let img = scene();
        for spec in type1_eval_suite().into_iter().chain([
            PerturbationSpec::Mask { size: 8 },
            PerturbationSpec::CropResize { ratio: 0.5, centered: false },
            PerturbationSpec::Contrast { factor: 1.5 },
        ]) {
            let out = apply_perturbation(&spec, &img, 3).unwrap();
            assert_eq!(out.dims(), img.dims(), "{spec}");
            assert!(out.in_unit_range(), "{spec}");
        }
    }

    #[test]
    fn oracle_kind_needs_endpoint() {
        let spec = PerturbationSpec::Oracle { instruction: "make it snow".into() };
        assert!(matches!(apply_perturbation(&spec, &scene(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn curriculum_endpoints() {
        let c = CurriculumSchedule::default();
        assert_eq!(c.range_at(Kind::Jpeg, 0), Some([10.0, 30.0]));
        assert_eq!(c.range_at(Kind::Jpeg, 100), Some([20.0, 90.0]));
        assert_eq!(c.range_at(Kind::GaussianNoise, 50), Some([0.03, 0.1]));
    }

    #[test]
    fn chains_cover_lengths_one_to_three() {
        let c = CurriculumSchedule::default();
        let mut seen = [false; 4];
        for seed in 0..1000 {
            let chain = c.sample_chain(0, seed);
            seen[chain.len()] = true;
            let mut kinds: Vec<_> = chain.iter().map(|s| s.kind()).collect();
            kinds.dedup();
            assert_eq!(kinds.len(), chain.len());
        }
        assert_eq!(seen, [false, true, true, true]);
    }

    #[test]
    fn analytic_pairs_share_the_perturbation() {
        let x = vec![scene(), scene().map(|v| 1.0 - v)];
        let mut p = AnalyticPerturber { curriculum: CurriculumSchedule::default() };
        let out = Perturber::<f64>::perturb_pairs(&mut p, &x, &x, 3, 0.5, 11).unwrap();
        assert_eq!(out.len(), 3);
        for inst in &out {
            assert_eq!(inst.len(), 2);
            for (a, b) in inst {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn labels_parse_back() {
        for spec in type1_eval_suite() {
            assert_eq!(spec.label().parse::<PerturbationSpec>().unwrap(), spec);
        }
        assert_eq!("jpeg:70".parse::<PerturbationSpec>().unwrap(), PerturbationSpec::Jpeg { quality: 70 });
        assert!("jpeg:0".parse::<PerturbationSpec>().is_err());
        assert!("warp:3".parse::<PerturbationSpec>().is_err());
    }
}
