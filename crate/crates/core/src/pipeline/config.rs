use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSchema;
use super::{PipelineError, Result};
use crate::aggregator::BiasMode;
use crate::encoder::PathPooling;
use crate::gpgnn::ModelConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
    Adam,
}

/// Every knob of a run. Read from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub activation: Activation,
    pub max_hops: usize,
    pub bias_mode: BiasMode,
    pub bias_weight: f64,
    /// Propagation layers.
    pub layers: usize,
    /// Node state width.
    pub state_dim: usize,
    pub word_dim: usize,
    pub position_dim: usize,
    /// Width of the path and relation-label text embeddings.
    pub text_dim: usize,
    pub path_pooling: PathPooling,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    pub threads: usize,
    pub schema: DatasetSchema,
    pub ontologies: Vec<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// GloVe-style cache used to initialise the word table.
    pub word_embeddings: Option<PathBuf>,
    /// Cache used to embed path and relation-label text.
    pub text_embeddings: Option<PathBuf>,
    pub context_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learning_rate: 0.001,
            batch_size: 50,
            dropout: 0.5,
            hidden: 256,
            activation: Activation::Relu,
            max_hops: crate::path_reasoner::DEFAULT_MAX_HOPS,
            bias_mode: BiasMode::OneHot,
            bias_weight: 1.0,
            layers: 2,
            state_dim: 64,
            word_dim: 50,
            position_dim: 50,
            text_dim: 64,
            path_pooling: PathPooling::Sum,
            epochs: 30,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            seed: 13,
            threads: 1,
            schema: DatasetSchema::PairwiseJson,
            ontologies: Vec::new(),
            train: None,
            valid: None,
            test: None,
            word_embeddings: None,
            text_embeddings: None,
            context_cache: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::from(e).in_file(path))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("max_hops", self.max_hops),
            ("layers", self.layers),
            ("state_dim", self.state_dim),
            ("word_dim", self.word_dim),
            ("position_dim", self.position_dim),
            ("text_dim", self.text_dim),
            ("epochs", self.epochs),
            ("threads", self.threads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PipelineError::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.bias_weight >= 0.0 && self.bias_weight.is_finite()) {
            return Err(PipelineError::Config("bias_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PipelineError::Config("momentum must be in [0, 1)".into()));
        }
        if self.state_dim < 2 {
            return Err(PipelineError::Config("state_dim must be at least 2".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, relations: usize) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            position_dim: self.position_dim,
            symbolic_dim: 2 * self.text_dim,
            state_dim: self.state_dim,
            layers: self.layers,
            hidden: self.hidden,
            relations,
            dropout: self.dropout,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_training_settings() {
        let c = RunConfig::default();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.batch_size, 50);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.hidden, 256);
        assert_eq!(c.activation, Activation::Relu);
        assert_eq!(c.max_hops, 5);
        assert_eq!(c.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn toml_round_trip_is_byte_exact() {
        let mut c = RunConfig::default();
        c.ontologies = vec!["a.txt".into(), "b.jsonl".into()];
        c.train = Some("train.jsonl".into());
        c.bias_mode = BiasMode::Full;
        c.learning_rate = 0.1 + 0.2;
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("learning_rate = 0.01\nwarmup = 3\n").is_err());
        assert!(RunConfig::from_toml("batch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("dropout = 1.0\n").is_err());
        assert!(RunConfig::from_toml("activation = \"tanh\"\n").is_err());
        let c = RunConfig::from_toml("epochs = 3\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 50);
    }
}
