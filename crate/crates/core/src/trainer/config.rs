use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhance::RetinexParams;
use crate::error::{invalid, Error, Result};
use crate::fusion::FusionVariant;
use crate::model::Architecture;
use crate::optim::AdamWConfig;
use crate::sampler::{AugmentParams, SslVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Ssl,
    Distill,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Ssl => "ssl",
            Stage::Distill => "distill",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "ssl" => Ok(Stage::Ssl),
            "distill" => Ok(Stage::Distill),
            other => Err(invalid(format!("unknown stage {other:?} (teacher|ssl|distill)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    #[serde(flatten)]
    pub adamw: AdamWConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: "adamw".into(), adamw: AdamWConfig::default() }
    }
}

/// Everything that determines a training run. Missing keys in a TOML file
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Classes per contrastive batch.
    pub n_c: usize,
    /// Clips per class per contrastive batch.
    pub n_v: usize,
    pub batch_ssl: usize,
    pub batch_kd: usize,
    pub optimizer: OptimizerConfig,
    pub tau_supcon: f64,
    pub tau_ssl: f64,
    pub tau_kd: f64,
    pub lambda_sup: f64,
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub seed: u64,
    pub fusion_variant: FusionVariant,
    pub ssl_variant: SslVariant,
    pub architecture: Architecture,
    pub retinex: RetinexParams,
    pub augment: AugmentParams,
    /// Extra unlabeled clips from the second capture family added to the SSL pool.
    pub ssl_extra_clips: usize,
    /// Evaluate on the validation split after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Teacher,
            epochs: 30,
            n_c: 4,
            n_v: 2,
            batch_ssl: 16,
            batch_kd: 8,
            optimizer: OptimizerConfig::default(),
            tau_supcon: 0.1,
            tau_ssl: 0.1,
            tau_kd: 4.0,
            lambda_sup: 0.1,
            lambda_ce: 1.0,
            lambda_kd: 1.0,
            seed: 0,
            fusion_variant: FusionVariant::Dff,
            ssl_variant: SslVariant::Both,
            architecture: Architecture::default(),
            retinex: RetinexParams::default(),
            augment: AugmentParams::default(),
            ssl_extra_clips: 120,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self { stage, ..Self::default() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.n_c == 0 || self.n_v == 0 || self.batch_kd == 0 {
            return Err(invalid("epochs and batch sizes must be positive"));
        }
        if self.batch_ssl < 2 {
            return Err(invalid(format!("SSL batch size {} leaves no negatives; need >= 2", self.batch_ssl)));
        }
        for (name, v) in [("tau_supcon", self.tau_supcon), ("tau_ssl", self.tau_ssl), ("tau_kd", self.tau_kd)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_sup", self.lambda_sup), ("lambda_ce", self.lambda_ce), ("lambda_kd", self.lambda_kd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.optimizer.name != "adamw" {
            return Err(invalid(format!("unsupported optimizer {:?}; only adamw is available", self.optimizer.name)));
        }
        self.optimizer.adamw.validate()?;
        self.architecture.encoder.validate()?;
        self.retinex.validate()?;
        if self.stage == Stage::Ssl && self.ssl_variant == SslVariant::None {
            return Err(invalid("ssl stage needs an ssl_variant other than none"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
