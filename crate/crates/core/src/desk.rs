//! The scaled-down reference run: synthetic 64×64 scenes, a 4×4 key and
//! Type-1 perturbations only. Training resumes from whatever checkpoint a
//! previous run left in its directory.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::detect::{evaluate, evaluate_marked};
use crate::image::{psnr, Image};
use crate::jigsaw::{new_key, perturb_key, JigsawKey};
use crate::model::Model;
use crate::perturb::{AnalyticPerturber, PerturbationSpec};
use crate::train::{RunConfig, Trainer};
use crate::{synth, Error, Result};

pub const TRAIN_IMAGES: usize = 2000;
pub const HELDOUT_IMAGES: usize = 200;
pub const SIZE: usize = 64;
const TRAIN_SEED: u64 = 1;
const HELDOUT_SEED: u64 = 2;
const KEY_SEED: u64 = 77;
/// Distinct one-swap keys averaged in the wrong-key study.
pub const SWAP_KEYS: usize = 5;
const EVAL_SEED: u64 = 5;

pub fn train_set() -> Vec<Image<f32>> {
    synth::corpus(TRAIN_IMAGES, SIZE, SIZE, TRAIN_SEED)
}

pub fn heldout_set() -> Vec<Image<f32>> {
    synth::corpus(HELDOUT_IMAGES, SIZE, SIZE, HELDOUT_SEED)
}

pub fn eval_key() -> JigsawKey {
    new_key((4, 4), KEY_SEED).expect("4x4 grid")
}

/// Short digest of the configuration; names the cache directory.
pub fn fingerprint(cfg: &RunConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskMetrics {
    pub epoch: usize,
    pub clean_auc: f64,
    pub jpeg70_auc: f64,
    /// Mean over [`SWAP_KEYS`] keys that differ from the true key by one
    /// swapped block pair.
    pub swap1_auc: f64,
    pub psnr_db: f64,
    /// Clean-score threshold at 1% false-positive rate.
    pub threshold_1pct_fpr: f64,
    pub tpr_at_1pct_fpr: f64,
}

pub fn measure(model: &Model<f32>, heldout: &[Image<f32>], key: &JigsawKey, epoch: usize) -> Result<DeskMetrics> {
    let clean = evaluate(model, heldout, key, None, EVAL_SEED)?;
    let jpeg = evaluate(model, heldout, key, Some(&PerturbationSpec::Jpeg { quality: 70 }), EVAL_SEED)?;
    let marked = model.embed(heldout, key)?;
    let mut swap = 0.0;
    for i in 0..SWAP_KEYS {
        let wrong = perturb_key(key, 1, EVAL_SEED + i as u64)?;
        swap += evaluate_marked(model, heldout, &marked, key, &wrong, None, EVAL_SEED)?.auc;
    }
    let psnr_db = heldout.iter().zip(&marked).map(|(a, b)| psnr(a, b)).sum::<f64>() / heldout.len() as f64;
    Ok(DeskMetrics {
        epoch,
        clean_auc: clean.auc,
        jpeg70_auc: jpeg.auc,
        swap1_auc: swap / SWAP_KEYS as f64,
        psnr_db,
        threshold_1pct_fpr: clean.threshold,
        tpr_at_1pct_fpr: clean.tpr_at_1pct_fpr,
    })
}

/// Trains `cfg` in `dir`, continuing from `dir/checkpoint.json` when it was
/// written by the same configuration. `on_epoch` sees the model after every
/// epoch completed in this call.
pub fn train(cfg: &RunConfig, dir: &Path, mut on_epoch: impl FnMut(&Trainer<f32>) -> Result<()>) -> Result<Model<f32>> {
    let ck = dir.join("checkpoint.json");
    let mut tr = match Checkpoint::load(&ck) {
        Ok(c) if c.config == *cfg => c.restore::<f32>()?,
        Ok(_) => return Err(Error::Config(format!("{} holds a different configuration", ck.display()))),
        Err(_) => Trainer::new(cfg.clone())?,
    };
    let data = train_set();
    let mut perturber = AnalyticPerturber {
        curriculum: cfg.curriculum.clone(),
    };
    while tr.epoch < cfg.train.epochs {
        let next = tr.epoch + 1;
        tr.fit_until(&data, &mut perturber, Some(dir), next)?;
        info!("desk run epoch {next}/{} done", cfg.train.epochs);
        on_epoch(&tr)?;
    }
    Ok(tr.model)
}
