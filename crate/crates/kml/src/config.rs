use std::path::PathBuf;

use anyhow::{bail, Result};
use kml_core::program::Aggregation;
use kml_core::qa::{GroundingNoise, TemplateId};
use kml_core::real::Precision;
use kml_core::synth::SyntheticKgSpec;
use kml_core::train::{EmbeddingMode, FinetuneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Settings for a full pipeline run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub precision: Precision,
    pub embedding_mode: EmbeddingMode,
    /// `{id: [..]}` vectors used instead of random initial embeddings.
    pub embeddings: Option<PathBuf>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Test questions per template.
    pub per_template: usize,
    /// Fine-tuning questions per template, drawn with a different seed.
    pub train_per_template: usize,
    /// Empty means all seventeen.
    pub templates: Vec<TemplateId>,
    pub noise: GroundingNoise,
    pub aggregation: Aggregation,
    /// Graph file; a synthetic graph is generated from `synth` when absent.
    pub kg: Option<PathBuf>,
    pub synth: SyntheticKgSpec,
    pub logic_k: usize,
    pub bound_samples: usize,
    pub max_hops: usize,
    pub separation_tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            dim: t.dim,
            hidden: t.hidden,
            temperature: t.temperature,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            precision: Precision::F32,
            embedding_mode: EmbeddingMode::Trainable,
            embeddings: None,
            finetune_epochs: 80,
            finetune_lr: FinetuneConfig::default().lr,
            per_template: 60,
            train_per_template: 120,
            templates: Vec::new(),
            noise: GroundingNoise {
                flip_prob: 0.6,
                top_k: 5,
            },
            aggregation: Aggregation::Max,
            kg: None,
            synth: SyntheticKgSpec::medium(0),
            logic_k: 10,
            bound_samples: 1000,
            max_hops: 3,
            separation_tau: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim as f64),
            ("hidden", self.hidden as f64),
            ("temperature", self.temperature),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("finetune_lr", self.finetune_lr),
            ("logic_k", self.logic_k as f64),
            ("max_hops", self.max_hops as f64),
            ("separation_tau", self.separation_tau),
            ("noise.top_k", self.noise.top_k as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bail!("config field `{name}` must be positive, got {v}");
            }
        }
        if !(0.0..=1.0).contains(&self.noise.flip_prob) {
            bail!("config field `noise.flip_prob` must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            hidden: self.hidden,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            temperature: self.temperature,
            seed: self.seed,
            embedding_mode: self.embedding_mode,
            precision: self.precision,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune_lr,
            epochs: self.finetune_epochs,
            seed: self.seed,
            ..FinetuneConfig::default()
        }
    }

    pub fn templates(&self) -> Vec<TemplateId> {
        if self.templates.is_empty() {
            TemplateId::all().collect()
        } else {
            self.templates.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_fields_take_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "epochs": 3}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.dim, 512);
        assert_eq!(c.batch_size, 256);
        c.validate().unwrap();
    }

    #[test]
    fn non_positive_fields_are_rejected() {
        let c = RunConfig {
            lr: 0.0,
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("lr"));
    }
}
