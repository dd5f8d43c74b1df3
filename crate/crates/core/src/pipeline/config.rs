//! Run configuration (TOML) and variant construction.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::dsp::{MfccConfig, StftConfig};
use crate::enhancer::EnhancerConfig;
use crate::losses::LossConfig;
use crate::model::{ModelBundle, ModelConfig, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub placement: Option<u8>,
    pub seed: u64,
    pub lr_enhancer: f64,
    pub lr_classifier: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub lambda: f64,
    pub consistency: bool,
    /// Classifier-only steps before joint training (variants with a classifier).
    pub pretrain_steps: usize,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    pub checkpoint_every: usize,
    /// Trained baseline checkpoint used as the frozen first stage of e_pbdr.
    pub stage1_checkpoint: Option<PathBuf>,
    pub mapper_hidden: usize,
    pub concat_channels: usize,
    pub enhancer: EnhancerConfig,
    pub classifier: ClassifierConfig,
    pub stft: StftConfig,
    pub mfcc: MfccConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Variant::Baseline, None);
        Self {
            variant: Variant::Baseline,
            placement: None,
            seed: 0,
            lr_enhancer: 2e-4,
            lr_classifier: 1e-3,
            batch_size: 8,
            epochs: 30,
            max_steps: None,
            lambda: 1.0,
            consistency: true,
            pretrain_steps: 200,
            checkpoint_every: 5,
            stage1_checkpoint: None,
            mapper_hidden: m.mapper_hidden,
            concat_channels: m.concat_channels,
            enhancer: m.enhancer,
            classifier: m.classifier,
            stft: m.stft,
            mfcc: m.mfcc,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let rc: RunConfig = toml::from_str(s)?;
        rc.validate()?;
        Ok(rc)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize run config: {e}")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            placement: self.placement,
            enhancer: self.enhancer.clone(),
            classifier: self.classifier.clone(),
            mapper_hidden: self.mapper_hidden,
            concat_channels: self.concat_channels,
            stft: self.stft.clone(),
            mfcc: self.mfcc.clone(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, consistency: self.consistency }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        for (name, lr) in [("lr_enhancer", self.lr_enhancer), ("lr_classifier", self.lr_classifier)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("batch_size, epochs and checkpoint_every must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be positive when given"));
        }
        if self.mapper_hidden == 0 || self.concat_channels == 0 {
            return Err(Error::config("mapper_hidden and concat_channels must be positive"));
        }
        match (self.variant, &self.stage1_checkpoint) {
            (Variant::EPbdr, None) => Err(Error::config("variant e_pbdr requires stage1_checkpoint")),
            (Variant::EPbdr, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::config(format!("variant {} does not use stage1_checkpoint", self.variant))),
            (_, None) => Ok(()),
        }
    }

    /// Every field as flattened `key=value` pairs, for log headers.
    pub fn flat_fields(&self) -> Result<Vec<(String, String)>> {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
            match v {
                serde_json::Value::Object(m) => {
                    for (k, x) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, x, out);
                    }
                }
                serde_json::Value::Null => out.push((prefix.to_string(), "none".into())),
                serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }
}

/// Fresh bundle for a run, loading the stage-1 checkpoint where needed.
/// `n_classes` overrides the classifier output width (taken from the corpus).
pub fn build_variant(rc: &RunConfig, n_classes: Option<usize>) -> Result<ModelBundle> {
    rc.validate()?;
    let mut cfg = rc.model_config();
    if let Some(l) = n_classes {
        cfg.classifier.n_classes = l;
    }
    let stage1 = match &rc.stage1_checkpoint {
        Some(path) => {
            let (b, _, _) = ModelBundle::load(path)?;
            if b.config().variant != Variant::Baseline {
                return Err(Error::config(format!(
                    "stage-1 checkpoint {} holds a {} model, expected baseline",
                    path.display(),
                    b.config().variant
                )));
            }
            Some(b.params().clone())
        }
        None => None,
    };
    ModelBundle::build(cfg, rc.seed, stage1.as_ref())
}
