use std::path::{Path, PathBuf};

use jigwm::attacks::{AttackConfig, SurrogateConfig};
use jigwm::hav::{HavConfig, HavTrainConfig};
use jigwm::train::RunConfig;
use serde::Deserialize;
use serde_json::Value;

use crate::commands::CliError;
use crate::Global;

#[derive(Deserialize, Debug, Clone, Copy, Default, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    /// Full-scale hyperparameters.
    Full,
    /// Tiny networks on 16×16 images.
    Smoke,
}

#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct HavSection {
    pub model: HavConfig,
    pub train: HavTrainConfig,
    /// Side of synthetic ranking images.
    pub image_size: usize,
    /// Fraction of groups held out for calibration and evaluation.
    pub holdout: f64,
}

impl Default for HavSection {
    fn default() -> Self {
        Self {
            model: HavConfig::desk(),
            train: HavTrainConfig::default(),
            image_size: 32,
            holdout: 0.2,
        }
    }
}

/// On-disk configuration. Relative paths resolve against the file's
/// directory; command-line flags take precedence.
#[derive(Deserialize, Debug, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub preset: Preset,
    /// Partial training configuration merged over the preset.
    pub run: Option<Value>,
    pub seed: Option<u64>,
    pub oracle: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub instructions: Option<PathBuf>,
    pub attack: AttackConfig,
    pub surrogate: SurrogateConfig,
    /// Watermarked and clean images each used to fit the surrogate.
    pub surrogate_samples: usize,
    pub hav: HavSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            run: None,
            seed: None,
            oracle: None,
            checkpoint: None,
            key: None,
            out: None,
            data: None,
            instructions: None,
            attack: AttackConfig::default(),
            surrogate: SurrogateConfig::default(),
            surrogate_samples: 2000,
            hav: HavSection::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolved settings for one invocation.
#[derive(Debug, Clone)]
pub struct Settings {
    pub file: FileConfig,
    pub run: RunConfig,
    pub seed: u64,
    /// Whether a seed was given explicitly.
    pub seeded: bool,
    pub oracle: Option<String>,
    pub oracle_timeout_ms: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub key: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Settings {
    pub fn load(g: &Global) -> Result<Self, CliError> {
        let (mut file, base) = match &g.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                let f: FileConfig = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                (f, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        for p in [&mut file.checkpoint, &mut file.key, &mut file.out, &mut file.data, &mut file.instructions]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&file.data, &file.instructions].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::usage(format!("configured path {} does not exist", p.display())));
            }
        }

        let preset = match file.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::default(),
            Preset::Smoke => RunConfig::smoke(),
        };
        let mut value = serde_json::to_value(&preset).expect("config serializes");
        if let Some(over) = file.run.clone() {
            merge(&mut value, over);
        }
        let mut run: RunConfig = serde_json::from_value(value).map_err(|e| CliError::usage(format!("run config: {e}")))?;
        let seed = g.seed.or(file.seed);
        if let Some(s) = seed {
            run.train.seed = s;
        }
        run.validate()?;
        file.attack.validate()?;
        file.hav.model.validate()?;

        Ok(Self {
            seed: seed.unwrap_or(run.train.seed),
            seeded: seed.is_some(),
            oracle: g.oracle.clone().or_else(|| file.oracle.clone()),
            oracle_timeout_ms: g.oracle_timeout_ms,
            checkpoint: g.checkpoint.clone().or_else(|| file.checkpoint.clone()),
            key: g.key.clone().or_else(|| file.key.clone()),
            out: g.out.clone().or_else(|| file.out.clone()),
            run,
            file,
        })
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        let p = self.out.as_deref().ok_or_else(|| CliError::usage("--out is required"))?;
        std::fs::create_dir_all(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn key_path(&self) -> Result<&Path, CliError> {
        self.key.as_deref().ok_or_else(|| CliError::usage("--key is required"))
    }

    pub fn checkpoint_path(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| CliError::usage("--checkpoint is required"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overrides_leaves_only() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge(&mut base, json!({"a": {"c": 5}, "e": 6}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": 3, "e": 6}));
    }
}
