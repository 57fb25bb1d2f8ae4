//! Run configuration: every tunable under a namespaced section, merged over
//! the desk-scale defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentParams;
use crate::data::SyntheticConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::loss::LossConfig;
use crate::masking::MaskConfig;
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticConfig,
    pub augment: AugmentParams,
    pub mask: MaskConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk scale: 10-joint synthetic data, shear amplitude 0.3, 4 masked
    /// joints, 300 steps of batch 32.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SyntheticConfig::default(),
            augment: AugmentParams {
                shear_amplitude: 0.3,
                ..AugmentParams::default()
            },
            mask: MaskConfig {
                masked_joints: 4,
                ..MaskConfig::default()
            },
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 50,
                batch_size: 32,
                warmup_epochs: 5,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Published hyperparameters: shear amplitude 1, 150 epochs of batch 128,
    /// 9 masked joints, 256-dim features and 6144-dim embeddings.
    pub fn paper_scale() -> Self {
        RunConfig {
            augment: AugmentParams::default(),
            mask: MaskConfig::default(),
            encoder: EncoderConfig::paper_scale(),
            train: TrainConfig::default(),
            ..RunConfig::default()
        }
    }

    /// Parses `text` and merges it over the defaults; unknown keys fail.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overlay: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.frames < 2 {
            return Err(Error::Config(format!("data.frames must be at least 2, got {}", self.data.frames)));
        }
        Ok(())
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of the effective configuration
    /// with the seed zeroed.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.seed = 0;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..12].to_string())
    }

    /// `<out_dir>/<hash>-s<seed>`.
    pub fn run_dir(&self, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
        Ok(out_dir.as_ref().join(format!("{}-s{}", self.hash()?, self.seed)))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            augment: self.augment.clone(),
            mask: self.mask.clone(),
            encoder: self.encoder.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[train]\nbatch_size = 16\n[loss]\nlambda = 0.01\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.loss.lambda, 0.01);
        assert!(c.loss.center_embeddings);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nbatchsize = 16\n").is_err());
        assert!(RunConfig::from_toml_str("[training]\nepochs = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nbatch_size = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[encoder]\ntemporal_kernel = 4\n").is_err());
    }

    #[test]
    fn echoed_config_round_trips() {
        let c = RunConfig::paper_scale();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_ignores_seed_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.mask.key_frames = 8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 12);
    }
}
