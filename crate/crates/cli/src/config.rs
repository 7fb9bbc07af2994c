//! Run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tumorseg::augment::AugmentationSpec;
use tumorseg::optimize::TrainConfig;
use tumorseg::{derive_seed, RegionKind, UNetConfig};

use crate::CliError;

/// One JSON document; command line flags override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationSpec,
    /// Apply `augmentation` on the fly while training.
    pub augment_training: bool,
    /// Tasks to train/evaluate; `train` takes exactly one.
    pub tasks: Vec<RegionKind>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Master seed for initialization, shuffling, augmentation and dropout.
    pub seed: u64,
    pub folds: usize,
    /// Single worker thread; loss logs omit wall-clock time.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationSpec::default(),
            augment_training: true,
            tasks: vec![RegionKind::Complete],
            manifest: None,
            out: None,
            seed: 0,
            folds: 5,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Invalid(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(vec![format!("config {}: {e}", path.display())]))
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.train.violations());
        if self.train.learning_rate == 0.0 {
            v.push(format!(
                "learning_rate must be positive, got {}",
                self.train.learning_rate
            ));
        }
        v.extend(self.augmentation.violations());
        if self.tasks.is_empty() {
            v.push("at least one task is required".into());
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            v.push("tasks must not repeat".into());
        }
        if self.folds < 2 {
            v.push(format!("folds must be at least 2, got {}", self.folds));
        }
        v
    }

    /// Training settings for one model, with seeds derived from the master
    /// seed and the model's position in the run.
    pub fn train_config(&self, stream: &[u64]) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[&[1], stream].concat()),
            ..self.train.clone()
        }
    }

    pub fn augmentation_spec(&self, stream: &[u64]) -> Option<AugmentationSpec> {
        self.augment_training.then(|| AugmentationSpec {
            seed: derive_seed(self.seed, &[&[2], stream].concat()),
            ..self.augmentation.clone()
        })
    }

    pub fn init_seed(&self, stream: &[u64]) -> u64 {
        derive_seed(self.seed, &[&[3], stream].concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.max_epochs, 100);
        assert_eq!(c.folds, 5);
        assert_eq!(c.augmentation.rotation_deg, 20.0);
        assert!(c.violations().is_empty());
    }

    #[test]
    fn all_violations_reported() {
        let mut c = RunConfig::default();
        c.train.max_epochs = 0;
        c.train.learning_rate = 0.0;
        c.folds = 1;
        c.model.base_filters = 0;
        assert!(c.violations().len() >= 4, "{:?}", c.violations());
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"train": {"max_epochs": 3}, "tasks": ["core"]}"#).unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.tasks, vec![RegionKind::Core]);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3}"#).is_err());
    }
}
