//! The JSON run configuration shared by every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::objective::{EncoderLoss, GrlMode, ObjectiveConfig};
use crate::model::{ModelConfig, ModelDims, ReferenceTransform};
use crate::selfaug::AugConfig;
use crate::synthdata::DatasetSpec;
use crate::trainer::TrainConfig;

/// The ablation axes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub encoder_loss: EncoderLoss,
    pub grl_mode: GrlMode,
    /// Applied to emotion-encoder references only.
    pub reference_transform: ReferenceTransform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub self_augmentation: AugConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.self_augmentation.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model_dims(&self.dataset).validate()
    }

    /// Seeds every training-side random stream from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.self_augmentation.seed = seed;
        self
    }

    pub fn model_dims(&self, spec: &DatasetSpec) -> ModelDims {
        ModelDims {
            config: self.model.clone(),
            feature_dim: spec.feature_dim,
            emotion_input_dim: self.ablation.reference_transform.output_dim(spec.feature_dim),
            n_speakers: spec.n_speakers,
            n_emotions: spec.n_emotions,
            n_tokens: spec.n_tokens,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            encoder_loss: self.ablation.encoder_loss,
            grl_mode: self.ablation.grl_mode,
            grl_lambda: self.train.grl_lambda,
            temperature: self.train.mpcl_temperature,
            weights: self.train.loss_weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"train": {"stage1_steps": 7}, "ablation": {"grl_mode": "ce", "reference_transform": "band_limit"},
                "self_augmentation": {"mode": "GT", "proportion": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.stage1_steps, 7);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.ablation.grl_mode, GrlMode::Ce);
        assert_eq!(cfg.model_dims(&cfg.dataset).emotion_input_dim, 4);
        assert_eq!(cfg.self_augmentation.proportion, 0.5);
    }

    #[test]
    fn rejects_bad_documents() {
        for bad in [
            r#"{"trian": {}}"#,
            r#"{"train": {"lr": 1}}"#,
            r#"{"ablation": {"grl_mode": "sine"}}"#,
            r#"{"self_augmentation": {"proportion": 2.0}}"#,
            r#"{"train": {"stage2_lr": 1.0}}"#,
            r#"{"model": {"latent_dim": 3}}"#,
            r#"{"dataset": {"n_speakers": 0}}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
        match RunConfig::from_json("{\n  \"train\": ,\n}") {
            Err(Error::Json(e)) => assert_eq!(e.line(), 2),
            other => panic!("{other:?}"),
        }
    }
}
