//! The pipeline config file: plain TOML with one section per subsystem.
//! Command-line flags override file values; every knob has a default, so an
//! empty file is a valid config.

use crate::error::CliError;
use geoplace_core::classify::{ScheduleSpec, TrainConfig};
use geoplace_core::numerics::OptimizerKind;
use geoplace_core::retrieve::{LnPlacement, LossKind, RrmConfig};
use geoplace_core::swc::{Aggregator, SwcConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub paths: Paths,
    pub partition: PartitionSection,
    pub classifier: ClassifierSection,
    pub rrm: RrmSection,
    pub swc: SwcSection,
    pub synthetic: SyntheticSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            partition: PartitionSection::default(),
            classifier: ClassifierSection::default(),
            rrm: RrmSection::default(),
            swc: SwcSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub artifacts: PathBuf,
    pub train_metadata: PathBuf,
    pub train_features: PathBuf,
    pub test_metadata: PathBuf,
    pub test_features: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            artifacts: "artifacts".into(),
            train_metadata: "train.csv".into(),
            train_features: "train.gpfv".into(),
            test_metadata: "test.csv".into(),
            test_features: "test.gpfv".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub coarse: u32,
    pub mid: u32,
    pub fine: u32,
    pub min_split_size: u32,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            coarse: 32,
            mid: 128,
            fine: 512,
            min_split_size: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// flat | hc | mvmf
    pub kind: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// adamw | sgd
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    /// cosine | step | constant
    pub schedule: String,
    pub momentum: f64,
    pub step_epochs: usize,
    pub decay_factor: f64,
    pub kappa0: f64,
    pub train_mu: bool,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            kind: "mvmf".into(),
            epochs: 12,
            batch_size: 64,
            optimizer: "adamw".into(),
            lr: 3e-3,
            weight_decay: 1e-4,
            schedule: "cosine".into(),
            momentum: 0.9,
            step_epochs: 5,
            decay_factor: 0.5,
            kappa0: 10.0,
            train_mu: false,
        }
    }
}

impl ClassifierSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let optimizer = match self.optimizer.as_str() {
            "adamw" => OptimizerKind::adamw(),
            "sgd" => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
            },
            other => return Err(CliError::Config(format!("unknown optimizer `{other}`"))),
        };
        let schedule = match self.schedule.as_str() {
            "cosine" => ScheduleSpec::Cosine,
            "constant" => ScheduleSpec::Constant,
            "step" => ScheduleSpec::StepDecay {
                factor: self.decay_factor,
                every_epochs: self.step_epochs,
            },
            other => return Err(CliError::Config(format!("unknown schedule `{other}`"))),
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            schedule,
            seed,
            kappa0: self.kappa0,
            train_mu: self.train_mu,
        })
    }

    pub fn validate_kind(&self) -> Result<(), CliError> {
        match self.kind.as_str() {
            "flat" | "hc" | "mvmf" => Ok(()),
            other => Err(CliError::Config(format!(
                "unknown classifier kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RrmSection {
    pub hidden: usize,
    pub tau: f64,
    pub bank: usize,
    pub batch_pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// infonce | triplet
    pub loss: String,
    pub margin: f64,
    pub residual: bool,
    /// input_and_after_sum | before_and_after_sum
    pub placement: String,
}

impl Default for RrmSection {
    fn default() -> Self {
        Self {
            hidden: 256,
            tau: 0.05,
            bank: 1024,
            batch_pairs: 32,
            epochs: 60,
            lr: 1e-3,
            weight_decay: 1e-4,
            loss: "infonce".into(),
            margin: 0.01,
            residual: true,
            placement: "input_and_after_sum".into(),
        }
    }
}

impl RrmSection {
    pub fn rrm_config(&self, seed: u64) -> Result<RrmConfig, CliError> {
        Ok(RrmConfig {
            hidden: self.hidden,
            tau: self.tau,
            bank_capacity: self.bank,
            batch_pairs: self.batch_pairs,
            epochs: self.epochs,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            loss: LossKind::parse(&self.loss).map_err(CliError::from)?,
            margin: self.margin,
            residual: self.residual,
            placement: LnPlacement::parse(&self.placement).map_err(CliError::from)?,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SwcSection {
    pub k: usize,
    pub epsilon_km: f64,
    pub min_samples: usize,
    /// spatial | average
    pub aggregator: String,
}

impl Default for SwcSection {
    fn default() -> Self {
        Self {
            k: 10,
            epsilon_km: 1.0,
            min_samples: 1,
            aggregator: "spatial".into(),
        }
    }
}

impl SwcSection {
    pub fn swc_config(&self) -> Result<SwcConfig, CliError> {
        let config = SwcConfig {
            k: self.k,
            epsilon_km: self.epsilon_km,
            min_samples: self.min_samples,
            aggregator: Aggregator::parse(&self.aggregator).map_err(CliError::from)?,
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub clusters: usize,
    pub kappa_loc: f64,
    pub dim: usize,
    pub signal_scale: f64,
    pub noise_sigma: f64,
    pub per_cluster: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            clusters: 64,
            kappa_loc: 1e6,
            dim: 64,
            signal_scale: 1.0,
            noise_sigma: 0.003,
            per_cluster: 868,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> geoplace_core::data::SyntheticSpec {
        geoplace_core::data::SyntheticSpec {
            clusters: self.clusters,
            kappa_loc: self.kappa_loc,
            dim: self.dim,
            signal_scale: self.signal_scale,
            noise_sigma: self.noise_sigma,
            samples_per_cluster: self.per_cluster,
            seed,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// The resolved config rendered back to TOML for run manifests.
    pub fn snapshot(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c: Config = toml::from_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.swc.k, 10);
        assert_eq!(c.rrm.tau, 0.05);
    }

    #[test]
    fn sections_parse_and_unknown_keys_rejected() {
        let c: Config = toml::from_str(
            r#"
seed = 9
[partition]
fine = 64
[swc]
k = 5
aggregator = "average"
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.partition.fine, 64);
        assert_eq!(c.partition.coarse, 32);
        assert!(matches!(
            c.swc.swc_config().unwrap().aggregator,
            Aggregator::Average
        ));

        let bad: Result<Config, _> = toml::from_str("[swc]\nnot_a_knob = 1\n");
        assert!(bad.is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let c = Config::default();
        let snap = c.snapshot();
        let back: Config = toml::from_str(&snap).unwrap();
        assert_eq!(back, c);
    }
}
