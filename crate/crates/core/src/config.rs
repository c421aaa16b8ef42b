//! Experiment configuration: one JSON document driving a whole run.

use serde::{Deserialize, Serialize};

use crate::datasim::PartitionScheme;
use crate::error::{Result, SafeLmError};
use crate::learners::{AdvConfig, Learner, LearnerKind};
use crate::paillier::ALLOWED_KEY_BITS;
use crate::quantizer::ThresholdVariant;

/// Server-side aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Homomorphic sum of binarized updates, decoded by sign of the sum.
    SecureMajority,
    /// Literal per-client coordinate median (plaintext reference mode).
    PlaintextMedian,
    /// Plain averaging of full-precision deltas (FedAvg).
    Mean,
    /// Averaging of clipped-and-noised deltas.
    DpMean,
    /// Zero-threshold signs, sign-of-sum decode, no encryption.
    SignsgdMajority,
}

// `flatten` on the kind tag rules out `deny_unknown_fields` here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub kind: LearnerKind,
    pub features: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: LearnerKind::Logreg,
            features: 20,
            classes: 7,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        Learner::dim(self.kind, self.features, self.classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpParams {
    pub clip: f64,
    pub sigma: f64,
}

impl Default for DpParams {
    fn default() -> Self {
        DpParams {
            clip: 0.1,
            sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub smote_k: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            epochs: 5,
            batch: 32,
            lr: 1e-3,
            smote_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub features: usize,
    pub per_class: usize,
    pub separation: f64,
    pub imbalance_ratio: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 7,
            features: 20,
            per_class: 200,
            separation: 3.0,
            imbalance_ratio: 1.0,
            test_fraction: 0.25,
        }
    }
}

/// Component switches for ablation runs. All on = the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub encryption: bool,
    pub smartification: bool,
    pub smote: bool,
    pub dp: bool,
    pub adversarial_training: bool,
    pub guard: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            encryption: true,
            smartification: true,
            smote: true,
            dp: true,
            adversarial_training: true,
            guard: true,
        }
    }
}

/// Adversary behavior for poisoning runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackKind {
    SignFlip,
    Scale {
        factor: f64,
    },
    Backdoor {
        trigger_coords: Vec<usize>,
        trigger_value: f64,
        target_label: usize,
        /// Fraction of a malicious shard that gets stamped and relabeled.
        sample_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub kind: AttackKind,
    /// Fraction of clients under adversary control.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Optional explicit delta dimension; must match the model when set.
    pub d: Option<usize>,
    #[serde(rename = "K")]
    pub clients: usize,
    pub rounds: usize,
    pub mode: AggregationMode,
    pub variant: ThresholdVariant,
    pub dp: DpParams,
    pub fedprox_mu: f64,
    pub alpha: f64,
    pub momentum: f64,
    /// Divide the decoded aggregate by K before the server step.
    pub normalize_by_k: bool,
    pub partition: PartitionScheme,
    pub attack: Option<AttackConfig>,
    pub seeds: Vec<u64>,
    pub local: LocalConfig,
    pub data: DataConfig,
    pub adv: AdvConfig,
    pub key_bits: u64,
    pub guard_tau: f64,
    pub toggles: Toggles,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            d: None,
            clients: 50,
            rounds: 200,
            mode: AggregationMode::SecureMajority,
            variant: ThresholdVariant::AbsMedian,
            dp: DpParams::default(),
            fedprox_mu: 0.0,
            alpha: 1e-3,
            momentum: 0.9,
            normalize_by_k: false,
            partition: PartitionScheme::Iid,
            attack: None,
            seeds: vec![42],
            local: LocalConfig::default(),
            data: DataConfig::default(),
            adv: AdvConfig::default(),
            key_bits: 2048,
            guard_tau: 0.55,
            toggles: Toggles::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(json)
            .map_err(|e| SafeLmError::config(format!("json:{}:{}", e.line(), e.column()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.features < 2 {
            return Err(SafeLmError::config("model.features", "need at least 2 features"));
        }
        if self.model.classes < 2 {
            return Err(SafeLmError::config("model.classes", "need at least 2 classes"));
        }
        if let LearnerKind::Mlp { hidden } = self.model.kind {
            if hidden == 0 {
                return Err(SafeLmError::config("model.hidden", "hidden width must be positive"));
            }
        }
        if let Some(d) = self.d {
            if d != self.model.dim() {
                return Err(SafeLmError::config(
                    "d",
                    format!("declared d = {d} but the model has {} parameters", self.model.dim()),
                ));
            }
        }
        if self.clients == 0 {
            return Err(SafeLmError::config("K", "need at least one client"));
        }
        if self.dp.clip < 0.0 || self.dp.sigma < 0.0 {
            return Err(SafeLmError::config("dp", "clip and sigma must be >= 0"));
        }
        if self.fedprox_mu < 0.0 {
            return Err(SafeLmError::config("fedprox_mu", "must be >= 0"));
        }
        if !self.alpha.is_finite() {
            return Err(SafeLmError::config("alpha", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SafeLmError::config("momentum", "must be in [0, 1)"));
        }
        if self.seeds.is_empty() {
            return Err(SafeLmError::config("seeds", "need at least one seed"));
        }
        if self.local.batch == 0 {
            return Err(SafeLmError::config("local.batch", "batch size must be positive"));
        }
        if !(self.local.lr.is_finite() && self.local.lr >= 0.0) {
            return Err(SafeLmError::config("local.lr", "must be finite and >= 0"));
        }
        if self.local.smote_k == 0 {
            return Err(SafeLmError::config("local.smote_k", "must be >= 1"));
        }
        if self.data.classes != self.model.classes {
            return Err(SafeLmError::config(
                "data.classes",
                format!("{} does not match model.classes = {}", self.data.classes, self.model.classes),
            ));
        }
        if self.data.features != self.model.features {
            return Err(SafeLmError::config(
                "data.features",
                format!("{} does not match model.features = {}", self.data.features, self.model.features),
            ));
        }
        if self.data.per_class == 0 {
            return Err(SafeLmError::config("data.per_class", "must be >= 1"));
        }
        if !(0.0 < self.data.imbalance_ratio && self.data.imbalance_ratio <= 1.0) {
            return Err(SafeLmError::config("data.imbalance_ratio", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(SafeLmError::config("data.test_fraction", "must be in [0, 1)"));
        }
        self.adv
            .validate()
            .map_err(|e| SafeLmError::config("adv", e.to_string()))?;
        if self.toggles.encryption && !ALLOWED_KEY_BITS.contains(&self.key_bits) {
            return Err(SafeLmError::config(
                "key_bits",
                format!("{} not in {ALLOWED_KEY_BITS:?}", self.key_bits),
            ));
        }
        if !(0.0..=1.0).contains(&self.guard_tau) {
            return Err(SafeLmError::config("guard_tau", "must be in [0, 1]"));
        }
        if let Some(attack) = &self.attack {
            if !(0.0..=1.0).contains(&attack.fraction) {
                return Err(SafeLmError::config("attack.fraction", "must be in [0, 1]"));
            }
            if let AttackKind::Backdoor {
                trigger_coords,
                target_label,
                sample_fraction,
                ..
            } = &attack.kind
            {
                if trigger_coords.iter().any(|&c| c >= self.model.features) {
                    return Err(SafeLmError::config(
                        "attack.trigger_coords",
                        "coordinate out of feature range",
                    ));
                }
                if *target_label >= self.model.classes {
                    return Err(SafeLmError::config("attack.target_label", "label out of class range"));
                }
                if !(0.0..=1.0).contains(sample_fraction) {
                    return Err(SafeLmError::config("attack.sample_fraction", "must be in [0, 1]"));
                }
            }
        }
        if let PartitionScheme::Dirichlet { alpha } = self.partition {
            if alpha <= 0.0 {
                return Err(SafeLmError::config("partition.alpha", "must be positive"));
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form; names artifact directories.
    pub fn stable_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}
