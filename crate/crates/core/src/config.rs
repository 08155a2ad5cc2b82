//! The run configuration document (TOML).
//!
//! Every section is optional and unknown keys are rejected. Model sizes
//! that depend on the data (`L`, `D`, `M_feat`) come from the bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::read_text;
use crate::error::{DmanError, Result};
use crate::eval::ClassifierConfig;
use crate::graph::DEFAULT_MAX_LINKS;
use crate::losses::{JointLossConfig, TripletLossConfig};
use crate::model::{EmbeddingKind, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub embedding: EmbeddingKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1);
        Self {
            hidden: m.hidden,
            dropout: m.dropout,
            embedding: m.embedding,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab: usize, regions: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            dropout: self.dropout,
            embedding: self.embedding,
            ..ModelConfig::new(vocab, regions, feat_dim)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub max_links: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_links: DEFAULT_MAX_LINKS,
        }
    }
}

/// Where region features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// `regions.f32` in the bundle.
    #[default]
    Precomputed,
    /// Seeded random projection of raw image patches.
    PatchProjector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub provider: ProviderKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            split_seed: 0,
            provider: ProviderKind::Precomputed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub triplet: TripletLossConfig,
    pub joint: JointLossConfig,
    pub model: ModelSection,
    pub graph: GraphConfig,
    pub classifier: ClassifierConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DmanError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?).map_err(|e| match e {
            DmanError::Config(msg) => DmanError::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.triplet.validate()?;
        self.joint.validate()?;
        self.classifier.validate()?;
        self.model.model_config(1, 1, 1).validate()?;
        if self.graph.max_links == 0 {
            return Err(DmanError::Config("max_links must be at least 1".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(DmanError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{SimilarityKind, TripletReduction};

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        // ranking margin
        assert_eq!(c.triplet.margin, 0.3);
        assert_eq!(c.triplet.similarity, SimilarityKind::PaperSumNorm);
        assert_eq!(c.triplet.reduction, TripletReduction::Sum);
        // negatives per anchor
        assert_eq!(c.train.negatives, 3);
        // positive-word weight and reconstruction weight
        assert_eq!(c.joint.lambda_pos, 10.0);
        assert_eq!(c.joint.beta, 1.0);
        // optimizer
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.momentum, 0.9);
        assert!(c.train.nesterov);
        // per-node link cap
        assert_eq!(c.graph.max_links, 50);
        // word-local layer widths and dropout
        assert_eq!(c.model.hidden, [128, 32]);
        assert_eq!(c.model.dropout, 0.5);
        // downstream head and decision threshold
        assert_eq!(c.classifier.hidden, [256, 64]);
        assert_eq!(c.classifier.threshold, 0.5);
        assert_eq!(c.data.train_fraction, 0.8);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_override() {
        let c = RunConfig::from_toml("[train]\nepochs = 7\n[joint]\nbeta = 0.0\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.joint.beta, 0.0);
        assert_eq!(c.train.negatives, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 7\n"), Err(DmanError::Config(_))));
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[triplet]\nmargin = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\ntrain_fraction = 1.0\n").is_err());
    }

    #[test]
    fn enum_spellings() {
        let c = RunConfig::from_toml(
            "[train]\nbatch_reduction = \"sum\"\ngrad_clip = 5.0\n[data]\nprovider = \"patch-projector\"\n",
        )
        .unwrap();
        assert_eq!(c.train.batch_reduction, crate::trainer::BatchReduction::Sum);
        assert_eq!(c.data.provider, ProviderKind::PatchProjector);
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.train.grad_clip = Some(5.0);
        c.model.embedding = EmbeddingKind::Logits;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
