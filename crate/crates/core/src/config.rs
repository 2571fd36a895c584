//! Flat key-value run configuration, read from TOML.
//!
//! Every key is optional; missing keys take the desk-scale defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{AttentionKind, EncoderConfig, ModelConfig, PromptMode, StageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_root: Option<PathBuf>,

    // Synthetic data.
    pub synth_identities: usize,
    pub synth_images_per_identity: usize,
    pub synth_occlusion_p: f32,
    pub synth_train_occlusion_p: Option<f32>,
    pub synth_train_fraction: f32,

    // Model.
    pub height: usize,
    pub width: usize,
    pub num_parts: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub window: usize,
    pub attention: AttentionKind,
    pub mlp_ratio: usize,
    pub drop_path: f32,
    pub msf: bool,
    pub abs_pos: bool,
    pub prompts: PromptMode,
    pub part_based: bool,
    pub soft_pooling: bool,
    pub alpha_g: f32,

    // Optimisation.
    pub epochs: usize,
    /// Batches per epoch; 0 derives it from the training-set size.
    pub steps_per_epoch: usize,
    pub ids_per_batch: usize,
    pub instances_per_id: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub warmup_epochs: usize,
    /// Leading epochs trained on part prediction alone, standing in for a
    /// pretrained backbone.
    pub pretrain_epochs: usize,
    pub freeze_prompt_epochs: usize,
    pub checkpoint_every: usize,

    // Augmentation.
    pub bipo_p: f64,
    pub erase_p: f64,
    pub crop_pad: usize,

    // Losses.
    pub lambda_pp: f64,
    pub margin: f64,
    pub smoothing_eps: f64,
    pub id_weight: f64,
    pub triplet_weight: f64,

    // Inference.
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset_root: None,
            synth_identities: 16,
            synth_images_per_identity: 8,
            synth_occlusion_p: 0.5,
            synth_train_occlusion_p: None,
            synth_train_fraction: 0.5,
            height: 64,
            width: 32,
            num_parts: 8,
            in_dim: 32,
            out_dim: 128,
            embed_dim: 64,
            stage_depths: vec![2, 2],
            stage_heads: vec![2, 4],
            window: 4,
            attention: AttentionKind::Windowed,
            mlp_ratio: 2,
            drop_path: 0.0,
            msf: true,
            abs_pos: true,
            prompts: PromptMode::Full,
            part_based: true,
            soft_pooling: false,
            alpha_g: crate::geometry::DEFAULT_ALPHA_G,
            epochs: 30,
            steps_per_epoch: 0,
            ids_per_batch: 4,
            instances_per_id: 4,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            warmup_epochs: 1,
            pretrain_epochs: 8,
            freeze_prompt_epochs: 12,
            checkpoint_every: 0,
            bipo_p: crate::augment::DEFAULT_BIPO_P,
            erase_p: crate::augment::DEFAULT_ERASE_P,
            crop_pad: 3,
            lambda_pp: 0.3,
            margin: 0.3,
            smoothing_eps: 0.1,
            id_weight: 1.0,
            triplet_weight: 1.0,
            batch_size: 32,
        }
    }
}

impl RunConfig {
    /// Learning-rate and input-size settings at the original training scale.
    pub fn paper_scale() -> Self {
        RunConfig {
            height: 256,
            width: 128,
            in_dim: 128,
            out_dim: 1024,
            embed_dim: 256,
            stage_depths: vec![2, 2, 18, 2],
            stage_heads: vec![4, 8, 16, 32],
            window: 8,
            epochs: 120,
            warmup_epochs: 5,
            pretrain_epochs: 0,
            freeze_prompt_epochs: 20,
            ids_per_batch: 16,
            instances_per_id: 4,
            lr: 0.008,
            crop_pad: 10,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.len() != self.stage_heads.len() {
            return Err(Error::Config(format!(
                "stage_depths has {} entries, stage_heads {}",
                self.stage_depths.len(),
                self.stage_heads.len()
            )));
        }
        if self.ids_per_batch < 2 || self.instances_per_id < 2 {
            return Err(Error::Config("batches need >= 2 identities with >= 2 instances each".into()));
        }
        if !(0.0..=1.0).contains(&self.bipo_p) || !(0.0..=1.0).contains(&self.erase_p) {
            return Err(Error::Config("augmentation probabilities must lie in [0,1]".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        self.model_config().validate()?;
        self.loss_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            num_parts: self.num_parts,
            embed_dim: self.embed_dim,
            encoder: EncoderConfig {
                in_dim: self.in_dim,
                out_dim: self.out_dim,
                stages: self
                    .stage_depths
                    .iter()
                    .zip(&self.stage_heads)
                    .map(|(&depth, &heads)| StageConfig { depth, heads, window: self.window })
                    .collect(),
                attention: self.attention,
                mlp_ratio: self.mlp_ratio,
                drop_path: self.drop_path,
                msf: self.msf,
                abs_pos: self.abs_pos,
            },
            prompts: self.prompts,
            part_based: self.part_based,
            soft_pooling: self.soft_pooling,
            alpha_g: self.alpha_g,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_pp: self.lambda_pp,
            margin: self.margin,
            smoothing_eps: self.smoothing_eps,
            id_weight: self.id_weight,
            triplet_weight: self.triplet_weight,
            ..LossConfig::default()
        }
    }

    pub fn synth_config(&self) -> crate::datamodel::SynthConfig {
        crate::datamodel::SynthConfig {
            identities: self.synth_identities,
            images_per_identity: self.synth_images_per_identity,
            height: self.height,
            width: self.width,
            occlusion_p: self.synth_occlusion_p,
            train_occlusion_p: self.synth_train_occlusion_p,
            train_fraction: self.synth_train_fraction,
            num_parts: self.num_parts,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig { epochs: 3, prompts: PromptMode::Off, ..RunConfig::default() };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_toml("epochs = 5\nbipo_p = 0.0\n").unwrap();
        assert_eq!((partial.epochs, partial.bipo_p), (5, 0.0));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("epoch = 5").is_err());
        assert!(RunConfig::from_toml("bipo_p = 1.5").is_err());
        assert!(RunConfig::from_toml("stage_depths = [1]").is_err());
    }

    #[test]
    fn paper_scale_preset_is_valid() {
        RunConfig::paper_scale().validate().unwrap();
    }
}
