//! Experiment configuration: a flat key-value file (TOML syntax) with
//! exactly the run-config keys; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FairsadError;
use crate::model::ModelHyper;
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // dataset source: either delimited files or the synthetic generator
    pub nodes_path: Option<String>,
    pub edges_path: Option<String>,
    pub delimiter: String,
    pub synthetic: bool,
    pub synth_nodes_per_group: usize,
    pub synth_intra_prob: f64,
    pub synth_inter_prob: f64,
    pub synth_feature_dim: usize,
    pub synth_leakage: f64,
    pub synth_label_signal: f64,
    pub synth_label_sensitive_correlation: f64,
    pub synth_seed: u64,

    // model
    pub channels: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub assigner_hidden: usize,
    pub temperature: f64,

    // objective and optimizer
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,

    // experiment protocol
    pub seeds: Vec<u64>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    // ablations
    pub disable_disentanglement: bool,
    pub disable_mask: bool,
    pub disable_micro: bool,
    pub disable_macro: bool,

    /// Restrict the mask covariance loss to training nodes instead of the
    /// whole graph.
    pub mask_cov_train_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nodes_path: None,
            edges_path: None,
            delimiter: ",".into(),
            synthetic: false,
            synth_nodes_per_group: 200,
            synth_intra_prob: 0.02,
            synth_inter_prob: 0.002,
            synth_feature_dim: 8,
            synth_leakage: 1.0,
            synth_label_signal: 1.0,
            synth_label_sensitive_correlation: 0.6,
            synth_seed: 0,
            channels: 4,
            hidden_dim: 16,
            layers: 1,
            assigner_hidden: 16,
            temperature: 1.0,
            alpha: 0.1,
            beta: 1.0,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 1000,
            seeds: vec![1, 2, 3, 4, 5],
            train_ratio: 0.5,
            val_ratio: 0.25,
            test_ratio: 0.25,
            disable_disentanglement: false,
            disable_mask: false,
            disable_micro: false,
            disable_macro: false,
            mask_cov_train_only: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, FairsadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FairsadError::io(path.display().to_string(), e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| FairsadError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FairsadError> {
        if self.epochs == 0 {
            return Err(FairsadError::Config("epochs must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(FairsadError::Config("lr must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(FairsadError::Config("temperature must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(FairsadError::Config("at least one seed is required".into()));
        }
        let k = self.effective_channels();
        if k == 0 || self.hidden_dim % k != 0 {
            return Err(FairsadError::Config(format!(
                "hidden_dim {} must be divisible by channels {k}",
                self.hidden_dim
            )));
        }
        if !self.synthetic && (self.nodes_path.is_none() || self.edges_path.is_none()) {
            return Err(FairsadError::Config(
                "either set synthetic = true or provide nodes_path and edges_path".into(),
            ));
        }
        if self.delimiter.as_bytes().len() != 1 {
            return Err(FairsadError::Config("delimiter must be a single byte".into()));
        }
        Ok(())
    }

    /// Channel count after ablation flags: removing disentanglement (or
    /// micro-disentanglement) forces a single channel.
    pub fn effective_channels(&self) -> usize {
        if self.disable_disentanglement || self.disable_micro {
            1
        } else {
            self.channels
        }
    }

    /// Whether the macro-disentanglement terms (distance correlation and the
    /// channel discriminator) take part in the objective.
    pub fn macro_terms_enabled(&self) -> bool {
        !(self.disable_disentanglement || self.disable_macro) && self.effective_channels() > 1
    }

    pub fn model_hyper(&self, feature_dim: usize) -> ModelHyper {
        ModelHyper {
            feature_dim,
            channels: self.effective_channels(),
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            assigner_hidden: self.assigner_hidden,
            temperature: self.temperature,
            disable_assigner: self.disable_disentanglement || self.disable_micro,
            disable_mask: self.disable_mask,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            nodes_per_group: self.synth_nodes_per_group,
            intra_prob: self.synth_intra_prob,
            inter_prob: self.synth_inter_prob,
            feature_dim: self.synth_feature_dim,
            leakage: self.synth_leakage,
            label_signal: self.synth_label_signal,
            label_sensitive_correlation: self.synth_label_sensitive_correlation,
            seed: self.synth_seed,
        }
    }
}
