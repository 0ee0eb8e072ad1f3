//! The run configuration: one TOML document covering every module.
//!
//! Unknown keys are rejected at every level. `RunConfig::default()` carries
//! the full-scale settings (224 px input, `D = 2048`, `k = 10`, three blocks
//! of eight heads, batch 128, 150 epochs, learning rate 3e-5,
//! `k1 = 200, k2 = 20, lambda = 0.3`). `RunConfig::desk()` shrinks the model
//! and data for CPU runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::dataset::{AugmentationPolicy, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::geometry::ContextSelection;
use crate::reranking::RerankParams;

/// Contextual proposal filtering (the region count `k` lives in
/// [`FusionConfig`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub confidence_threshold: f64,
    pub exclude_anchor_iou: Option<f64>,
}

impl Default for ContextConfig {
    fn default() -> Self {
        let d = ContextSelection::default();
        Self {
            confidence_threshold: d.confidence_threshold,
            exclude_anchor_iou: d.exclude_anchor_iou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Beta distribution parameter for mixup; `0` disables mixup.
    pub mixup_alpha: f64,
    /// Hidden width of the classifier; `D / 2` when unset.
    pub classifier_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 150,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            early_stop_patience: 15,
            mixup_alpha: 0.2,
            classifier_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("training.batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("training.max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("training.weight_decay must be non-negative".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("training.early_stop_patience must be positive".into()));
        }
        if self.mixup_alpha < 0.0 {
            return Err(Error::Config("training.mixup_alpha must be non-negative".into()));
        }
        if self.classifier_hidden == Some(0) {
            return Err(Error::Config("training.classifier_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    /// Entries kept per query in the ranked-list export.
    pub limit: usize,
    pub rerank: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { limit: 8, rerank: false }
    }
}

/// Everything a run needs besides paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub context: ContextConfig,
    pub augment: AugmentationPolicy,
    pub training: TrainConfig,
    pub rerank: RerankParams,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    /// CPU-sized settings: 64 px synthetic images, `D = 64`, `k = 3`, two
    /// blocks of four heads.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.seed = 7;
        c.backbone.feature_dim = 64;
        c.backbone.input_size = 64;
        c.fusion.k = 3;
        c.fusion.blocks = 2;
        c.fusion.heads = 4;
        c.fusion.dropout = 0.1;
        c.augment.color_jitter = 0.1;
        c.training.batch_size = 32;
        c.training.max_epochs = 80;
        c.training.learning_rate = 1e-3;
        c.training.early_stop_patience = 20;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.feature_dim)?;
        self.training.validate()?;
        self.rerank.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = self.context.confidence_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("context.confidence_threshold {t} outside [0, 1]")));
        }
        if self.retrieval.limit == 0 {
            return Err(Error::Config("retrieval.limit must be positive".into()));
        }
        Ok(())
    }

    pub fn context_selection(&self) -> ContextSelection {
        ContextSelection {
            k: self.fusion.k,
            confidence_threshold: self.context.confidence_threshold,
            exclude_anchor_iou: self.context.exclude_anchor_iou,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            cfg.validate().unwrap();
            let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn full_scale_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.backbone.feature_dim, 2048);
        assert_eq!(c.backbone.input_size, 224);
        assert_eq!(c.fusion.k, 10);
        assert_eq!((c.fusion.blocks, c.fusion.heads), (3, 8));
        assert_eq!(c.training.batch_size, 128);
        assert_eq!(c.training.max_epochs, 150);
        assert_eq!(c.training.learning_rate, 3e-5);
        assert_eq!((c.rerank.k1, c.rerank.k2, c.rerank.lambda), (200, 20, 0.3));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[fusion]\nblocks = 2\nwidth = 3").is_err());
        let partial = RunConfig::from_toml_str("[fusion]\nblocks = 1\n").unwrap();
        assert_eq!(partial.fusion.blocks, 1);
        assert_eq!(partial.fusion.heads, 8);
    }

    #[test]
    fn inconsistent_heads_rejected() {
        assert!(RunConfig::from_toml_str("[backbone]\nfeature_dim = 30\n").is_err());
        assert!(RunConfig::from_toml_str("[training]\nearly_stop_patience = 0\n").is_err());
    }

    #[test]
    fn shipped_desk_file_matches_preset() {
        let c = RunConfig::from_toml_str(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(c, RunConfig::desk());
    }

    #[test]
    fn external_backbone_parses() {
        let c = RunConfig::from_toml_str("[backbone]\nkind = \"external_adapter\"\nfeature_dir = \"feats\"\n").unwrap();
        assert!(c.backbone.kind == crate::backbone::BackboneKind::ExternalAdapter);
    }
}
