//! Experiment configuration: schema, loading, validation, hashing.
//!
//! Configs are TOML with a fixed schema. Unknown keys are rejected so a
//! typo'd field fails loudly instead of silently corrupting a sweep.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{AttackMethod, AttackSpec, AttackStrength, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetId {
    Cifar10,
    Stl10,
    Gtsrb,
    Svhn,
    SynthTiny,
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetId::Cifar10 => "CIFAR10",
            DatasetId::Stl10 => "STL10",
            DatasetId::Gtsrb => "GTSRB",
            DatasetId::Svhn => "SVHN",
            DatasetId::SynthTiny => "SYNTH-TINY",
        };
        f.write_str(s)
    }
}

impl DatasetId {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "CIFAR10" => Ok(DatasetId::Cifar10),
            "STL10" => Ok(DatasetId::Stl10),
            "GTSRB" => Ok(DatasetId::Gtsrb),
            "SVHN" => Ok(DatasetId::Svhn),
            "SYNTH-TINY" => Ok(DatasetId::SynthTiny),
            other => Err(Error::UnsupportedDataset(other.to_string())),
        }
    }

    /// Canonical (height, width, channels) images are scaled to at load time.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self {
            DatasetId::Cifar10 | DatasetId::Gtsrb | DatasetId::Svhn => (32, 32, 3),
            DatasetId::Stl10 => (32, 32, 3), // resized from 96x96 at ingestion
            DatasetId::SynthTiny => (16, 16, 3),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetId::Cifar10 | DatasetId::Stl10 | DatasetId::Svhn => 10,
            DatasetId::Gtsrb => 43,
            DatasetId::SynthTiny => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    Rn18,
    Rn34,
    Rn50,
    TinyCnn,
}

impl ArchId {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "rn18" => Ok(ArchId::Rn18),
            "rn34" => Ok(ArchId::Rn34),
            "rn50" => Ok(ArchId::Rn50),
            "tiny-cnn" | "tiny_cnn" | "tinycnn" => Ok(ArchId::TinyCnn),
            other => Err(Error::validation(
                "architecture",
                format!("unknown architecture '{other}'"),
            )),
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArchId::Rn18 => "rn18",
            ArchId::Rn34 => "rn34",
            ArchId::Rn50 => "rn50",
            ArchId::TinyCnn => "tiny-cnn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TeacherMethod {
    Ft,
    Fp,
    Anp,
    Moth,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StudentStrategy {
    Raw,
    Void,
    Warmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Fitnets,
    Cc,
    Afd,
    Atd,
    Sp,
    Kd,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Fitnets,
        LossKind::Cc,
        LossKind::Afd,
        LossKind::Atd,
        LossKind::Sp,
        LossKind::Kd,
    ];
}

/// Learning-rate / batch-size record shared by training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerHParams {
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for OptimizerHParams {
    fn default() -> Self {
        OptimizerHParams {
            learning_rate: 0.001,
            batch_size: 256,
        }
    }
}

/// Declarative attack description inside a config file; the pixel-level
/// [`AttackSpec`] is materialized from it via [`AttackConfig::to_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub target_class: usize,
    /// Side of the square trigger patch, in pixels.
    pub trigger_size: usize,
    /// Solid trigger pixel value in [0,1] (1.0 = white).
    pub trigger_value: f64,
    /// Optional (row, col) anchor; bottom-right when absent.
    pub trigger_position: Option<(usize, usize)>,
    pub strength: AttackStrength,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: AttackMethod::BadEncoder,
            target_class: 0,
            trigger_size: 3,
            trigger_value: 1.0,
            trigger_position: None,
            strength: AttackStrength::default(),
        }
    }
}

impl AttackConfig {
    pub fn to_spec(&self, channels: usize) -> Result<AttackSpec> {
        let mut trigger = Trigger::white_square(self.trigger_size, channels)?;
        trigger.pattern.fill(self.trigger_value);
        trigger.position = self.trigger_position;
        let spec = AttackSpec {
            trigger,
            target_class: self.target_class,
            method: self.method,
            strength: self.strength.clone(),
        };
        Ok(spec)
    }
}

/// Teacher-construction knobs, all reported alongside results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Fraction of channels zeroed by FP/ANP pruning.
    pub prune_fraction: f64,
    /// Multiplicative perturbation bound for ANP sensitivity scoring.
    pub anp_budget: f64,
    /// Gradient-ascent steps for MOTH trigger inversion.
    pub inversion_steps: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            prune_fraction: 0.1,
            anp_budget: 0.4,
            inversion_steps: 200,
        }
    }
}

/// Stage-level training epoch budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageEpochs {
    pub pretrain: usize,
    pub warmup: usize,
    pub attack: usize,
    pub teacher: usize,
    pub downstream: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs {
            pretrain: 300,
            warmup: 300,
            attack: 100,
            teacher: 50,
            downstream: 500,
        }
    }
}

/// Size knobs for the synthetic desk-scale dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_size: 600,
            test_size: 300,
        }
    }
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub pretrain_dataset: DatasetId,
    pub downstream_dataset: DatasetId,
    pub architecture: ArchId,
    pub attack: AttackConfig,
    pub teacher_method: TeacherMethod,
    pub student_strategy: StudentStrategy,
    pub loss_kind: LossKind,
    pub distill_epochs: usize,
    pub clean_data_ratio: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    pub optimizer_hparams: OptimizerHParams,
    pub epochs: StageEpochs,
    pub synth: SynthConfig,
    pub teacher: TeacherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pretrain_dataset: DatasetId::Cifar10,
            downstream_dataset: DatasetId::Gtsrb,
            architecture: ArchId::Rn18,
            attack: AttackConfig::default(),
            teacher_method: TeacherMethod::Ft,
            student_strategy: StudentStrategy::Warmup,
            loss_kind: LossKind::Atd,
            distill_epochs: 500,
            clean_data_ratio: 0.05,
            iterations: 1,
            alpha: 0.5,
            seed: 0,
            optimizer_hparams: OptimizerHParams::default(),
            epochs: StageEpochs::default(),
            synth: SynthConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clean_data_ratio > 0.0 && self.clean_data_ratio <= 1.0) {
            return Err(Error::validation(
                "clean_data_ratio",
                format!("must lie in (0,1], got {}", self.clean_data_ratio),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(
                "alpha",
                format!("must lie in [0,1], got {}", self.alpha),
            ));
        }
        if self.distill_epochs == 0 && self.teacher_method != TeacherMethod::None {
            // epochs=0 is only meaningful for the identity pipeline
        }
        if self.iterations < 1 {
            return Err(Error::validation("iterations", "must be >= 1"));
        }
        if self.optimizer_hparams.learning_rate <= 0.0 {
            return Err(Error::validation(
                "optimizer_hparams.learning_rate",
                "must be positive",
            ));
        }
        if self.optimizer_hparams.batch_size == 0 {
            return Err(Error::validation(
                "optimizer_hparams.batch_size",
                "must be positive",
            ));
        }
        let num_classes = self.downstream_dataset.num_classes();
        if self.attack.target_class >= num_classes {
            return Err(Error::validation(
                "attack.target_class",
                format!(
                    "target class {} invalid for {} ({} classes)",
                    self.attack.target_class, self.downstream_dataset, num_classes
                ),
            ));
        }
        if self.attack.trigger_size == 0 {
            return Err(Error::validation("attack.trigger_size", "must be >= 1"));
        }
        let (h, _, _) = self.pretrain_dataset.image_shape();
        if self.attack.trigger_size > h {
            return Err(Error::validation(
                "attack.trigger_size",
                format!("trigger {}px exceeds image side {h}px", self.attack.trigger_size),
            ));
        }
        if !(0.0..=1.0).contains(&self.attack.trigger_value) {
            return Err(Error::validation("attack.trigger_value", "must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.teacher.prune_fraction) {
            return Err(Error::validation("teacher.prune_fraction", "must lie in [0,1)"));
        }
        if self.teacher.anp_budget <= 0.0 {
            return Err(Error::validation("teacher.anp_budget", "must be > 0"));
        }
        if self.attack.method == AttackMethod::Bassl {
            let r = self.attack.strength.poisoning_ratio;
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::validation("attack.poisoning_ratio", "must lie in (0,1]"));
            }
        }
        Ok(())
    }

    /// Stable content hash; invariant under field reordering in the source
    /// file because hashing goes through a canonical key-sorted JSON value.
    pub fn config_hash(&self) -> String {
        hash_value(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        let (_, _, c) = self.pretrain_dataset.image_shape();
        let spec = self.attack.to_spec(c)?;
        spec.validate(self.downstream_dataset.num_classes())?;
        Ok(spec)
    }
}

/// Hash any serializable value through canonical JSON (keys sorted).
pub fn hash_value<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_value(value).expect("value serializes");
    let canonical = serde_json::to_string(&json).expect("canonical json");
    let digest = Sha256::digest(canonical.as_bytes());
    hex_string(&digest[..16])
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load and validate a config file. An empty file yields all defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::MalformedConfig { message, .. } => Error::MalformedConfig {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Parse config text (TOML, fixed schema, unknown keys rejected).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::MalformedConfig {
        path: "<inline>".to_string(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Serialize a config back to its file format.
pub fn serialize_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.clean_data_ratio, 0.05);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.iterations, 1);
        assert_eq!(c.optimizer_hparams.learning_rate, 0.001);
        assert_eq!(c.optimizer_hparams.batch_size, 256);
    }

    #[test]
    fn out_of_range_alpha_rejected() {
        let err = parse_config("alpha = 1.5").unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "alpha"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let err = parse_config("alhpa = 0.5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alhpa") || msg.contains("unknown"), "{msg}");
    }

    #[test]
    fn round_trip_preserves_config() {
        let text = r#"
            seed = 7
            clean_data_ratio = 0.1
            loss_kind = "SP"
            [attack]
            method = "bassl"
            target_class = 2
            trigger_size = 5
        "#;
        let c = parse_config(text).unwrap();
        let reparsed = parse_config(&serialize_config(&c).unwrap()).unwrap();
        assert_eq!(c, reparsed);
        assert_eq!(c.config_hash(), reparsed.config_hash());
    }

    #[test]
    fn hash_injective_on_grid() {
        // Every (teacher, student, loss) cell of the component grid hashes
        // distinctly.
        let mut hashes = std::collections::HashSet::new();
        let mut count = 0;
        for teacher in [
            TeacherMethod::Ft,
            TeacherMethod::Fp,
            TeacherMethod::Anp,
            TeacherMethod::Moth,
        ] {
            for student in [
                StudentStrategy::Raw,
                StudentStrategy::Void,
                StudentStrategy::Warmup,
            ] {
                for loss in LossKind::ALL {
                    let mut c = ExperimentConfig::default();
                    c.teacher_method = teacher;
                    c.student_strategy = student;
                    c.loss_kind = loss;
                    hashes.insert(c.config_hash());
                    count += 1;
                }
            }
        }
        assert_eq!(hashes.len(), count);
    }

    #[test]
    fn dataset_catalog_matches_published_shapes() {
        assert_eq!(DatasetId::Cifar10.num_classes(), 10);
        assert_eq!(DatasetId::Gtsrb.num_classes(), 43);
        assert_eq!(DatasetId::Cifar10.image_shape(), (32, 32, 3));
        assert_eq!(DatasetId::SynthTiny.image_shape(), (16, 16, 3));
    }
}
