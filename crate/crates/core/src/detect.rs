//! Keyed embedding and detection on the deployment path, plus ROC metrics.

use jigwm_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::jigsaw::{perturb_key, JigsawKey};
use crate::model::Model;
use crate::perturb::{apply_perturbation, PerturbationSpec};
use crate::{Error, Result};

pub fn embed<T: Scalar>(img: &Image<T>, key: &JigsawKey, model: &Model<T>) -> Result<Image<T>> {
    Ok(model.embed(std::slice::from_ref(img), key)?.remove(0))
}

/// Watermark score `k = D(S(img))` under the claimed key.
pub fn detect<T: Scalar>(img: &Image<T>, key: &JigsawKey, model: &Model<T>) -> Result<f64> {
    Ok(model.scores(std::slice::from_ref(img), key)?[0].as_f64())
}

/// Brings an arbitrary image to the model resolution: aspect-preserving
/// scale to cover, then centre crop. Returns whether anything changed.
pub fn conform<T: Scalar>(img: &Image<T>, height: usize, width: usize) -> (Image<T>, bool) {
    if img.dims() == (height, width) {
        (img.clone(), false)
    } else {
        (img.letterbox(height, width), true)
    }
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("score lists must be nonempty".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::Contract("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the positive rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let n_pos = all[i..j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid * n_pos;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / 2.0 / (np * nn) as f64)
}

/// Smallest observed score `t` with `fraction(neg ≥ t) ≤ fpr`, and the
/// fraction of positives at or above it. When no observed score qualifies the
/// threshold sits just above the largest score.
pub fn tpr_at_fpr(pos: &[f64], neg: &[f64], fpr: f64) -> Result<(f64, f64)> {
    check_scores(pos, neg)?;
    if !(0.0..=1.0).contains(&fpr) {
        return Err(Error::Contract(format!("fpr {fpr} outside [0, 1]")));
    }
    let mut negs = neg.to_vec();
    negs.sort_by(f64::total_cmp);
    let mut cands: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let n = negs.len() as f64;
    let rate = |t: f64| (negs.len() - negs.partition_point(|&v| v < t)) as f64 / n;
    let thr = match cands.iter().find(|&&t| rate(t) <= fpr) {
        Some(&t) => t,
        None => next_up(*cands.last().expect("nonempty")),
    };
    let tpr = pos.iter().filter(|&&v| v >= thr).count() as f64 / pos.len() as f64;
    Ok((tpr, thr))
}

fn next_up(v: f64) -> f64 {
    if v.is_infinite() && v > 0.0 {
        v
    } else if v == 0.0 {
        f64::from_bits(1)
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() + 1)
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub key_id: String,
    pub perturbation: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub threshold: f64,
    #[serde(skip)]
    pub pos_scores: Vec<f64>,
    #[serde(skip)]
    pub neg_scores: Vec<f64>,
}

impl DetectionReport {
    pub fn from_scores(key_id: String, perturbation: String, pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        let auc = roc_auc(&pos, &neg)?;
        let (tpr, threshold) = tpr_at_fpr(&pos, &neg, 0.01)?;
        Ok(Self {
            key_id,
            perturbation,
            n_pos: pos.len(),
            n_neg: neg.len(),
            auc,
            tpr_at_1pct_fpr: tpr,
            threshold,
            pos_scores: pos,
            neg_scores: neg,
        })
    }
}

fn perturb_all<T: Scalar>(imgs: &[Image<T>], spec: Option<&PerturbationSpec>, seed: u64) -> Result<Vec<Image<T>>> {
    match spec {
        None => Ok(imgs.to_vec()),
        Some(s) => imgs
            .iter()
            .enumerate()
            .map(|(i, im)| apply_perturbation(s, im, seed.wrapping_add(i as u64)))
            .collect(),
    }
}

fn to_f64<T: Scalar>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(Scalar::as_f64).collect()
}

/// Positives: watermarked then perturbed. Negatives: clean then perturbed.
/// Both scored under `key`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    images: &[Image<T>],
    key: &JigsawKey,
    perturbation: Option<&PerturbationSpec>,
    seed: u64,
) -> Result<DetectionReport> {
    let marked = model.embed(images, key)?;
    evaluate_marked(model, images, &marked, key, key, perturbation, seed)
}

/// As [`evaluate`] with watermarked images supplied and a possibly different
/// key used for detection.
pub fn evaluate_marked<T: Scalar>(
    model: &Model<T>,
    clean: &[Image<T>],
    marked: &[Image<T>],
    embed_key: &JigsawKey,
    detect_key: &JigsawKey,
    perturbation: Option<&PerturbationSpec>,
    seed: u64,
) -> Result<DetectionReport> {
    let pos = to_f64(model.scores(&perturb_all(marked, perturbation, seed)?, detect_key)?);
    let neg = to_f64(model.scores(&perturb_all(clean, perturbation, seed)?, detect_key)?);
    let label = perturbation.map_or_else(|| "none".to_string(), PerturbationSpec::label);
    let mut r = DetectionReport::from_scores(embed_key.id(), label, pos, neg)?;
    if detect_key != embed_key {
        r.perturbation = format!("{}|detect_key={}", r.perturbation, detect_key.id());
    }
    Ok(r)
}

/// Embeds with `key` and detects with `key` after `n` disjoint block swaps,
/// for `n = 0..=max_pairs`.
pub fn mismatch_study<T: Scalar>(
    model: &Model<T>,
    images: &[Image<T>],
    key: &JigsawKey,
    max_pairs: usize,
    seed: u64,
) -> Result<Vec<DetectionReport>> {
    let marked = model.embed(images, key)?;
    (0..=max_pairs.min(key.blocks() / 2))
        .map(|n| {
            let k = if n == 0 { key.clone() } else { perturb_key(key, n, seed.wrapping_add(n as u64))? };
            let mut r = evaluate_marked(model, images, &marked, key, &k, None, seed)?;
            r.perturbation = format!("mismatch:{n}");
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut twice = 0u64;
        for p in pos {
            for n in neg {
                twice += if p > n { 2 } else if p == n { 1 } else { 0 };
            }
        }
        twice as f64 / 2.0 / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3, 0.6, 0.6], &[0.3, 0.6, 0.6]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(roc_auc(&[], &[0.1]).is_err());
    }

    #[test]
    fn threshold_example() {
        let mut neg: Vec<f64> = (0..99).map(|i| i as f64 / 200.0).collect();
        neg.push(0.9);
        let pos = vec![0.8, 0.95, 0.3];
        let (tpr, thr) = tpr_at_fpr(&pos, &neg, 0.01).unwrap();
        assert!(thr > 98.0 / 200.0);
        assert_eq!(neg.iter().filter(|&&v| v >= thr).count(), 1);
        assert!((tpr - 2.0 / 3.0).abs() < 1e-12);
        let (tpr, _) = tpr_at_fpr(&[0.95, 0.99], &neg, 0.01).unwrap();
        assert_eq!(tpr, 1.0);
    }

    #[test]
    fn threshold_above_everything_when_unreachable() {
        let (tpr, thr) = tpr_at_fpr(&[0.1], &[0.5, 0.5], 0.0).unwrap();
        assert!(thr > 0.5);
        assert_eq!(tpr, 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            pos in prop::collection::vec(0u8..20, 1..40),
            neg in prop::collection::vec(0u8..20, 1..40),
        ) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64 / 19.0).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64 / 19.0).collect();
            let a = roc_auc(&p, &n).unwrap();
            prop_assert_eq!(a, brute_auc(&p, &n));
            prop_assert!((a + roc_auc(&n, &p).unwrap() - 1.0).abs() < 1e-12);
            let cubed: Vec<f64> = p.iter().map(|v| v * v * v - 2.0).collect();
            let ncubed: Vec<f64> = n.iter().map(|v| v * v * v - 2.0).collect();
            prop_assert_eq!(roc_auc(&cubed, &ncubed).unwrap(), a);
        }

        #[test]
        fn exchangeable_scores_stay_near_chance(scores in prop::collection::vec(0.0f64..1.0, 1..200)) {
            let (tpr, _) = tpr_at_fpr(&scores, &scores, 0.01).unwrap();
            prop_assert!(tpr <= 0.01 + 1.0 / scores.len() as f64 + 1e-12);
        }
    }
}
