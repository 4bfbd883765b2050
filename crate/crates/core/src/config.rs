//! Run configuration: one structured document with a section per pipeline
//! stage. Every field has a desk-scale default, so partial files (or none at
//! all) are valid; CLI flags override on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idselect::IdSelectConfig;
use crate::losses::KernelSpec;
use crate::refine::RefineConfig;
use crate::synthdata::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelGenConfig {
    /// Lower cosine threshold psi for assigning a pseudo label.
    pub psi: f64,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        LabelGenConfig { psi: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature tau.
    pub tau: f64,
    /// Triplet margin m_t.
    pub margin: f64,
    pub lambda_cov: f64,
    pub lambda_ie: f64,
    pub lambda_det: f64,
    /// Column pairs sampled per step for the decorrelation terms.
    pub decorr_pairs: usize,
    pub kernel: KernelSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            margin: 0.3,
            lambda_cov: 0.1,
            lambda_ie: 3.0,
            lambda_det: 1.0,
            decorr_pairs: 8,
            kernel: KernelSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsbnConfig {
    pub epsilon: f64,
    pub zeta_temperature: f64,
}

impl Default for DsbnConfig {
    fn default() -> Self {
        DsbnConfig {
            epsilon: 1e-5,
            zeta_temperature: 1.0,
        }
    }
}

/// Which pipeline components are active; each can be disabled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Multi-task prototype-based domain-specific batch normalization.
    pub mdsbn: bool,
    /// Box refinement (hard confidence filter + soft loss weights).
    pub br: bool,
    /// Missing-label generation before each epoch after the first.
    pub mlg: bool,
    /// Feature decorrelation (channel mask + dependence penalties).
    pub fd: bool,
    /// Inter-frame enhancement triplet.
    pub ie: bool,
    /// Intra-frame distinction negatives.
    pub id: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            mdsbn: true,
            br: true,
            mlg: true,
            fd: true,
            ie: true,
            id: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Toggles {
            mdsbn: false,
            br: false,
            mlg: false,
            fd: false,
            ie: false,
            id: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Instances per optimization step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Prototype / running-statistics momentum m.
    pub prototype_momentum: f64,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Negative queue capacity Q.
    pub queue_capacity: usize,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            lr_decay_epoch: 12,
            lr_decay_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            prototype_momentum: 0.9,
            embed_dim: 16,
            queue_capacity: 64,
            seed: 1,
            toggles: Toggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Domain held out of training and used for all reported metrics.
    pub holdout_domain: u32,
    pub detection_iou_min: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_domain: 2,
            detection_iou_min: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub refine: RefineConfig,
    pub labelgen: LabelGenConfig,
    pub loss: LossConfig,
    pub dsbn: DsbnConfig,
    pub idselect: IdSelectConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.refine.validate()?;
        if !(-1.0..=1.0).contains(&self.labelgen.psi) {
            return Err(Error::Config(format!(
                "labelgen.psi must be in [-1, 1], got {}",
                self.labelgen.psi
            )));
        }
        if self.loss.tau <= 0.0 {
            return Err(Error::Config(format!(
                "loss.tau must be positive, got {}",
                self.loss.tau
            )));
        }
        for (name, v) in [
            ("lambda_cov", self.loss.lambda_cov),
            ("lambda_ie", self.loss.lambda_ie),
            ("lambda_det", self.loss.lambda_det),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {v}")));
            }
        }
        self.loss.kernel.validate()?;
        if self.dsbn.epsilon <= 0.0 {
            return Err(Error::Config("dsbn.epsilon must be positive".into()));
        }
        if self.dsbn.zeta_temperature <= 0.0 {
            return Err(Error::Config("dsbn.zeta_temperature must be positive".into()));
        }
        if self.idselect.drop_budget < 0.0 {
            return Err(Error::Config("idselect.drop_budget must be >= 0".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.embed_dim == 0 {
            return Err(Error::Config("train counts must be positive".into()));
        }
        if t.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.prototype_momentum) {
            return Err(Error::Config(format!(
                "train.prototype_momentum must be in [0, 1), got {}",
                t.prototype_momentum
            )));
        }
        if self.eval.holdout_domain >= self.generator.num_domains {
            return Err(Error::Config(format!(
                "eval.holdout_domain {} out of range (K = {})",
                self.eval.holdout_domain, self.generator.num_domains
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.detection_iou_min) {
            return Err(Error::Config("eval.detection_iou_min must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// FNV-1a hash of the canonical (JSON) form of the config; stamps every
/// output file so runs are traceable to their manifest.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_overrides_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
[generator]
num_domains = 4
seed = 99

[train]
epochs = 3

[eval]
holdout_domain = 3
"#,
        )
        .unwrap();
        assert_eq!(cfg.generator.num_domains, 4);
        assert_eq!(cfg.generator.seed, 99);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.eval.holdout_domain, 3);
    }

    #[test]
    fn bad_field_is_config_error_naming_the_field() {
        let err = RunConfig::from_toml_str("[labelgen]\npsi = 3.0\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("psi"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let s = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.train.seed = 2;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
