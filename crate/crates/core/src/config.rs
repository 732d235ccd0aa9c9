//! Pipeline configuration file (TOML). Every section is optional; missing
//! keys take their defaults.
//!
//! ```toml
//! seed = 7
//!
//! [silence]
//! threshold_db = -40.0
//!
//! [model]
//! hidden_layers = [560, 560, 560, 560]
//! depth_limit = 2
//! node_k = { "Bedouin" = 7 }
//!
//! [training]
//! learning_rate = 0.01
//!
//! [evaluation]
//! k_folds = 5
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::SilenceGate;
use crate::evaluation::ExperimentConfig;
use crate::hierarchy::{DialectTree, HierarchyError, LcpnConfig};
use crate::neuralnet::TrainConfig;
use crate::pitch::PitchConfig;
use crate::prosody::{ExtractConfig, FEATURE_COUNT};
use crate::segmentation::NucleusConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_layers: Vec<usize>,
    pub dropout: f64,
    /// Deepest tree level kept; `None` keeps the whole hierarchy.
    pub depth_limit: Option<usize>,
    /// Per-node feature counts, overriding the hierarchy file.
    pub node_k: BTreeMap<String, usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lcpn = LcpnConfig::default();
        Self {
            hidden_layers: lcpn.hidden_layers,
            dropout: lcpn.dropout,
            depth_limit: None,
            node_k: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub k_folds: usize,
    pub flat_k: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            k_folds: e.k_folds,
            flat_k: e.flat_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub silence: SilenceGate,
    pub pitch: PitchConfig,
    pub nuclei: NucleusConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| ConfigError::MissingFile(path.display().to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.extract_config().validate().map_err(invalid)?;
        self.training.validate().map_err(|e| invalid(e.to_string()))?;
        let m = &self.model;
        if m.hidden_layers.is_empty() || m.hidden_layers.contains(&0) {
            return Err(invalid("model.hidden_layers needs at least one non-empty layer".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(invalid(format!("model.dropout {} outside [0, 1)", m.dropout)));
        }
        for (label, &k) in &m.node_k {
            if !(1..=FEATURE_COUNT).contains(&k) {
                return Err(invalid(format!("model.node_k for `{label}` is {k}, expected 1..={FEATURE_COUNT}")));
            }
        }
        let e = &self.evaluation;
        if e.k_folds < 2 {
            return Err(invalid(format!("evaluation.k_folds is {}, need at least 2", e.k_folds)));
        }
        if !(1..=FEATURE_COUNT).contains(&e.flat_k) {
            return Err(invalid(format!("evaluation.flat_k is {}, expected 1..={FEATURE_COUNT}", e.flat_k)));
        }
        Ok(())
    }

    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            silence: self.silence,
            pitch: self.pitch,
            nuclei: self.nuclei,
        }
    }

    pub fn lcpn_config(&self) -> LcpnConfig {
        LcpnConfig {
            hidden_layers: self.model.hidden_layers.clone(),
            dropout: self.model.dropout,
            train: self.training,
        }
    }

    pub fn experiment_config(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            k_folds: self.evaluation.k_folds,
            seed,
            flat_k: self.evaluation.flat_k,
            lcpn: self.lcpn_config(),
        }
    }

    /// Applies the depth limit, then the per-node feature counts.
    pub fn shape_tree(&self, tree: DialectTree) -> Result<DialectTree, ConfigError> {
        let mut tree = match self.model.depth_limit {
            Some(l) => tree.limit_depth(l)?,
            None => tree,
        };
        for (label, &k) in &self.model.node_k {
            tree = tree.with_k(label, k)?;
        }
        Ok(tree)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let text = PipelineConfig::default().to_toml();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = PipelineConfig::from_toml_str(
            "seed = 3\n[model]\nhidden_layers = [8]\ndepth_limit = 2\nnode_k = { Bedouin = 5 }\n\
             [training]\nmax_epochs = 9\n[evaluation]\nk_folds = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.training.max_epochs, 9);
        assert_eq!(cfg.training.batch_size, 32);
        let tree = cfg.shape_tree(DialectTree::default_tree()).unwrap();
        assert_eq!(tree.k(tree.find("Bedouin").unwrap()), 5);
        assert!(tree.is_leaf(tree.find("Hilali").unwrap()));
        assert_eq!(cfg.experiment_config(1).k_folds, 4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "[evaluation]\nk_folds = 1",
            "[evaluation]\nflat_k = 15",
            "[model]\ndropout = 1.0",
            "[model]\nhidden_layers = []",
            "[training]\nlearning_rate = -1.0",
            "[pitch]\nfloor_hz = 600.0",
        ] {
            assert!(matches!(PipelineConfig::from_toml_str(bad), Err(ConfigError::Invalid(_))), "{bad}");
        }
        assert!(matches!(PipelineConfig::from_toml_str("[nope]\nx = 1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn unknown_node_in_node_k_fails_when_shaping() {
        let cfg = PipelineConfig::from_toml_str("[model]\nnode_k = { Atlantis = 3 }").unwrap();
        assert!(cfg.shape_tree(DialectTree::default_tree()).is_err());
    }
}
