use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::structure::StructureRegConfig;

/// Fixed learning rate, or `"auto"` to run the range test first.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LrSetting {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for LrSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LrSetting::Auto => s.serialize_str("auto"),
            LrSetting::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LrSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LrSetting::Fixed(v)),
            Raw::Str(s) if s == "auto" => Ok(LrSetting::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "lr must be a number or \"auto\", got {s:?}"
            ))),
        }
    }
}

/// Which rows the regularizer sees at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegSubset {
    /// The current mini-batch.
    #[default]
    Batch,
    /// The same seeded subset of `n` training rows at every step.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrFinderConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
}

impl Default for LrFinderConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-6,
            lr_max: 1.0,
            steps: 100,
        }
    }
}

/// Hyperparameters of the alignment objective and its optimizer. The
/// regularizer temperature `reg.tau` is also the contrastive temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSetting,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub early_stop_patience: usize,
    pub lambda: f64,
    pub lambda_warmup_steps: usize,
    pub reg: StructureRegConfig,
    pub reg_subset: RegSubset,
    pub seed: u64,
    pub lr_finder: LrFinderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 4096,
            lr: LrSetting::Auto,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            early_stop_patience: 200,
            lambda: 10.0,
            lambda_warmup_steps: 1000,
            reg: StructureRegConfig::default(),
            reg_subset: RegSubset::Batch,
            seed: 0,
            lr_finder: LrFinderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn tau(&self) -> f64 {
        self.reg.tau
    }

    /// `lambda * min(1, step / warmup)`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.lambda_warmup_steps == 0 {
            self.lambda
        } else {
            self.lambda * (step as f64 / self.lambda_warmup_steps as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.reg.validate().map_err(|e| e.to_string())?;
        if self.batch_size < 2 {
            return Err("batch_size must be >= 2".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if let LrSetting::Fixed(v) = self.lr {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("lr must be > 0, got {v}"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err("grad_clip must be > 0".into());
        }
        if let RegSubset::Fixed(n) = self.reg_subset {
            if n < 2 {
                return Err("reg_subset fixed size must be >= 2".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
