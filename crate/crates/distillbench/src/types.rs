//! Shared domain types used by every pipeline stage.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel patch stamped onto images to activate a backdoor.
///
/// `pattern` is height x width x channels with values in [0, 1]. The anchor
/// is the top-left corner of the patch inside the target image; `None` means
/// bottom-right placement, resolved against the image at stamp time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub pattern: Array3<f64>,
    /// (row, col) anchor; `None` anchors the patch at the bottom-right corner.
    pub position: Option<(usize, usize)>,
}

impl Trigger {
    /// Solid white square of the given side length, anchored bottom-right.
    pub fn white_square(side: usize, channels: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::validation("trigger.size", "side must be >= 1"));
        }
        Ok(Trigger {
            pattern: Array3::ones((side, side, channels)),
            position: None,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.pattern.shape();
        (s[0], s[1])
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        if h == 0 || w == 0 {
            return Err(Error::validation("trigger.size", "must be at least 1x1"));
        }
        if self.pattern.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::validation(
                "trigger.pattern",
                "pattern values must lie in [0,1]",
            ));
        }
        Ok(())
    }

    /// Resolve the anchor for an image of the given height/width.
    pub fn anchor_for(&self, img_h: usize, img_w: usize) -> Result<(usize, usize)> {
        let (th, tw) = self.size();
        match self.position {
            Some((r, c)) => {
                if r + th > img_h || c + tw > img_w {
                    return Err(Error::Geometry(format!(
                        "trigger {th}x{tw} at ({r},{c}) exceeds image {img_h}x{img_w}"
                    )));
                }
                Ok((r, c))
            }
            None => {
                if th > img_h || tw > img_w {
                    return Err(Error::Geometry(format!(
                        "trigger {th}x{tw} larger than image {img_h}x{img_w}"
                    )));
                }
                Ok((img_h - th, img_w - tw))
            }
        }
    }
}

/// Attack method identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    BadEncoder,
    Bassl,
}

/// Method-specific attack strength knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackStrength {
    /// BadEncoder: weight of the trigger-alignment (effect) term.
    pub lambda_effect: f64,
    /// BadEncoder: weight of the clean-preservation (utility) term.
    pub lambda_utility: f64,
    /// BadEncoder: fraction of the pre-training set used as shadow data.
    pub shadow_fraction: f64,
    /// BadEncoder: number of target-class reference images.
    pub reference_count: usize,
    /// BASSL: fraction of migrated target-class images that get stamped.
    pub poisoning_ratio: f64,
    /// BASSL: fraction of the downstream target class migrated into the
    /// pre-training set (must be more than half).
    pub migration_fraction: f64,
}

impl Default for AttackStrength {
    fn default() -> Self {
        AttackStrength {
            lambda_effect: 1.0,
            lambda_utility: 1.0,
            shadow_fraction: 0.1,
            reference_count: 3,
            poisoning_ratio: 0.5,
            migration_fraction: 0.6,
        }
    }
}

/// Full description of one backdoor attack: trigger, target, method, strength.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub trigger: Trigger,
    pub target_class: usize,
    pub method: AttackMethod,
    pub strength: AttackStrength,
}

impl AttackSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.trigger.validate()?;
        if self.target_class >= num_classes {
            return Err(Error::validation(
                "attack.target_class",
                format!(
                    "target class {} not a valid label (num_classes={num_classes})",
                    self.target_class
                ),
            ));
        }
        if self.method == AttackMethod::Bassl {
            let r = self.strength.poisoning_ratio;
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::validation(
                    "attack.strength.poisoning_ratio",
                    "must lie in (0,1]",
                ));
            }
        }
        Ok(())
    }
}

/// Artifact kinds tracked by the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Encoder,
    Classifier,
    DatasetSubset,
    Metrics,
}

/// Pointer to a persisted artifact plus the lineage that produced it.
///
/// Lineage entries are (stage name, config hash) pairs, oldest first; the
/// first entry names the stage that produced the artifact's root input and
/// the last entry the stage that wrote this artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub path: String,
    pub lineage: Vec<(String, String)>,
    pub iteration_index: usize,
}

impl ArtifactRef {
    pub fn validate(&self) -> Result<()> {
        if self.lineage.is_empty() {
            return Err(Error::validation("artifact.lineage", "must be non-empty"));
        }
        Ok(())
    }
}
