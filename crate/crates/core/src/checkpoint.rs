//! Self-describing JSON snapshot of a training run.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use jigwm_autograd::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Model;
use crate::train::{RunConfig, Trainer};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Little-endian values, base64.
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimRecord {
    pub t: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    /// Digest of the configuration, parameters and position.
    pub id: String,
    pub parent: Option<String>,
    pub config: RunConfig,
    pub epoch: usize,
    pub global_step: u64,
    pub dtype: String,
    pub encoder: Vec<TensorRecord>,
    pub decoder: Vec<TensorRecord>,
    pub encoder_optim: OptimRecord,
    pub decoder_optim: OptimRecord,
    pub clip_history: Vec<f64>,
}

pub(crate) fn encode<T: Scalar>(name: &str, t: &Tensor<T>) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    TensorRecord {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub(crate) fn decode<T: Scalar>(r: &TensorRecord) -> Result<Tensor<T>> {
    let bytes = STANDARD.decode(&r.data).map_err(|e| Error::Format(format!("{}: {e}", r.name)))?;
    let n: usize = r.shape.iter().product();
    if bytes.len() != n * T::BYTES {
        return Err(Error::Format(format!("{}: {} bytes for {n} values", r.name, bytes.len())));
    }
    Ok(Tensor::new(&r.shape, bytes.chunks(T::BYTES).map(T::read_le).collect()))
}

pub(crate) fn encode_store<T: Scalar>(store: &ParamStore<T>) -> Vec<TensorRecord> {
    store.iter().map(|(n, t)| encode(n, t)).collect()
}

pub(crate) fn load_store<T: Scalar>(store: &mut ParamStore<T>, records: &[TensorRecord]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Format(format!("{} tensors stored, model has {}", records.len(), store.len())));
    }
    for r in records {
        let id = store.id_of(&r.name).ok_or_else(|| Error::Format(format!("unknown parameter {}", r.name)))?;
        let t = decode::<T>(r)?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format(format!("{}: shape {:?} vs {:?}", r.name, t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

fn encode_optim<T: Scalar>(store: &ParamStore<T>, opt: &jigwm_autograd::AdamW<T>) -> OptimRecord {
    let (t, m, v) = opt.state();
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    OptimRecord {
        t,
        m: names.iter().zip(m).map(|(n, x)| encode(n, x)).collect(),
        v: names.iter().zip(v).map(|(n, x)| encode(n, x)).collect(),
    }
}

fn decode_all<T: Scalar>(records: &[TensorRecord]) -> Result<Vec<Tensor<T>>> {
    records.iter().map(decode).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(tr: &Trainer<T>) -> Self {
        let mut ck = Self {
            format: CHECKPOINT_FORMAT,
            id: String::new(),
            parent: tr.parent.clone(),
            config: tr.config.clone(),
            epoch: tr.epoch,
            global_step: tr.global_step,
            dtype: T::DTYPE.to_string(),
            encoder: encode_store(tr.model.encoder.params()),
            decoder: encode_store(tr.model.decoder.params()),
            encoder_optim: encode_optim(tr.model.encoder.params(), &tr.enc_opt),
            decoder_optim: encode_optim(tr.model.decoder.params(), &tr.dec_opt),
            clip_history: tr.clip_history.clone(),
        };
        ck.id = ck.digest();
        ck
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.epoch.to_le_bytes());
        h.update(self.global_step.to_le_bytes());
        for r in self.encoder.iter().chain(&self.decoder) {
            h.update(r.name.as_bytes());
            h.update(r.data.as_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_dtype<T: Scalar>(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("checkpoint format {} unsupported", self.format)));
        }
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {} values, requested {}", self.dtype, T::DTYPE)));
        }
        Ok(())
    }

    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        self.check_dtype::<T>()?;
        let mut m = Model::new(self.config.model.clone(), 0)?;
        load_store(m.encoder.params_mut(), &self.encoder)?;
        load_store(m.decoder.params_mut(), &self.decoder)?;
        Ok(m)
    }

    /// Rebuilds the trainer so that `fit` continues where it stopped.
    pub fn restore<T: Scalar>(&self) -> Result<Trainer<T>> {
        let mut tr = Trainer::from_parts(self.model()?, self.config.clone());
        tr.enc_opt.restore(
            self.encoder_optim.t,
            decode_all(&self.encoder_optim.m)?,
            decode_all(&self.encoder_optim.v)?,
        );
        tr.dec_opt.restore(
            self.decoder_optim.t,
            decode_all(&self.decoder_optim.m)?,
            decode_all(&self.decoder_optim.v)?,
        );
        tr.clip_history = self.clip_history.clone();
        tr.epoch = self.epoch;
        tr.global_step = self.global_step;
        tr.parent = self.parent.clone();
        Ok(tr)
    }

    /// Atomic write through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_slice(&bytes)?;
        if ck.digest() != ck.id {
            return Err(Error::Format(format!("{}: checkpoint id does not match contents", path.display())));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::NoPerturbation;
    use crate::synth;
    use crate::train::tests::tiny_config;

    #[test]
    fn resume_matches_uninterrupted_run() {
        let imgs = synth::corpus(8, 16, 16, 3);
        let mut full = Trainer::<f32>::new(tiny_config()).unwrap();
        let all = full.fit(&imgs, &mut NoPerturbation, None).unwrap();

        let mut half = Trainer::<f32>::new(tiny_config()).unwrap();
        let first = half.fit_until(&imgs, &mut NoPerturbation, None, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        Checkpoint::capture(&half).save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        let mut resumed = ck.restore::<f32>().unwrap();
        let rest = resumed.fit(&imgs, &mut NoPerturbation, None).unwrap();

        let joined: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(serde_json::to_string(&joined).unwrap(), serde_json::to_string(&all).unwrap());
        assert_eq!(
            resumed.model.encoder.params().values(),
            full.model.encoder.params().values()
        );
    }

    #[test]
    fn rejects_tampering_and_dtype_mismatch() {
        let tr = Trainer::<f32>::new(tiny_config()).unwrap();
        let ck = Checkpoint::capture(&tr);
        assert!(ck.model::<f64>().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        let mut bad = ck.clone();
        bad.epoch = 7;
        bad.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn finetune_records_parent() {
        let mut tr = Trainer::<f32>::new(tiny_config()).unwrap();
        let id = Checkpoint::capture(&tr).id;
        tr.finetune(&synth::corpus(4, 16, 16, 1), &mut NoPerturbation, 2, 0.1).unwrap();
        let ck = Checkpoint::capture(&tr);
        assert_eq!(ck.parent.as_deref(), Some(id.as_str()));
        assert_ne!(ck.id, id);
    }
}
