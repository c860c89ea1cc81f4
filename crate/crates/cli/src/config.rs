//! The run configuration file: JSON, every training hyperparameter a named
//! key that defaults to the published value.

use std::fs;
use std::path::{Path, PathBuf};

use mcl_core::data::AugmentParams;
use mcl_core::geometry::LabelingPattern;
use mcl_core::json::overlay;
use mcl_core::loss::DEFAULT_ALPHA;
use mcl_core::train::{PipelineConfig, StageConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pattern: LabelingPattern,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub pretrain: StageConfig,
    pub weighting: StageConfig,
    pub multicenter: StageConfig,
    pub alpha: f64,
    /// Expand the training set with `augmentation` before pre-training.
    pub augment: bool,
    pub augmentation: AugmentParams,
    /// Required, here or on the command line.
    pub seed: Option<u64>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pattern: LabelingPattern::SixtyEight,
            train: None,
            val: None,
            test: None,
            pretrain: StageConfig::paper_pretrain(),
            weighting: StageConfig::paper_finetune(),
            multicenter: StageConfig::paper_finetune(),
            alpha: DEFAULT_ALPHA,
            augment: true,
            augmentation: AugmentParams::default(),
            seed: None,
            output: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Parses `text` over the defaults: any key, at any depth, may be left
    /// out.
    pub fn from_json(text: &str) -> mcl_core::Result<Self> {
        overlay(&RunConfig::default(), text)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            pretrain: self.pretrain.clone(),
            weighting: self.weighting.clone(),
            multicenter: self.multicenter.clone(),
            alpha: self.alpha,
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (`--seed` or `\"seed\"` in the config)".into()))
    }

    /// Everything `train` needs, checked before any compute.
    pub fn validate_for_training(&self) -> Result<(), CliError> {
        self.seed()?;
        self.pipeline().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.augment {
            self.augmentation
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        for (key, path) in [("train", &self.train), ("val", &self.val)] {
            match path {
                None => return Err(CliError::Usage(format!("config key `{key}` is required for training"))),
                Some(p) if !p.join("meta.txt").is_file() => {
                    return Err(CliError::Usage(format!(
                        "`{key}` dataset {} does not exist (no meta.txt)",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(p) = &self.test {
            if !p.join("meta.txt").is_file() {
                return Err(CliError::Usage(format!(
                    "`test` dataset {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_published_values() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pretrain.initial_lr, 0.02);
        assert_eq!(cfg.weighting.initial_lr, 0.001);
        assert_eq!(cfg.alpha, 125.0);
        assert!(cfg.seed().is_err());
    }

    #[test]
    fn partial_stage_override_keeps_other_keys() {
        let cfg = RunConfig::from_json(r#"{"pattern": 5, "seed": 3, "pretrain": {"max_iterations": 10}}"#).unwrap();
        assert_eq!(cfg.pattern, LabelingPattern::Five);
        assert_eq!(cfg.pretrain.max_iterations, 10);
        assert_eq!(cfg.pretrain.batch_size, 64);
        assert_eq!(cfg.seed().unwrap(), 3);
    }

    #[test]
    fn unknown_keys_and_patterns_rejected() {
        assert!(RunConfig::from_json(r#"{"lr": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pretrain": {"lr": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pattern": 13}"#).is_err());
    }

    #[test]
    fn missing_train_path_fails_validation() {
        let cfg = RunConfig {
            seed: Some(1),
            train: Some("/nonexistent/train".into()),
            val: Some("/nonexistent/val".into()),
            ..RunConfig::default()
        };
        let err = cfg.validate_for_training().unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn shipped_desk_config_matches_the_desk_pipeline() {
        let cfg = RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
        assert_eq!(cfg.pipeline(), PipelineConfig::desk());
        assert_eq!(cfg.augmentation.max_outputs, Some(10));
    }
}
