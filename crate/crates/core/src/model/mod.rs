//! The promptable part-based network: tokenizers, encoder and part head.

pub mod encoder;
pub mod head;
pub mod nn;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{AttentionKind, Encoder, EncoderConfig, StageConfig};
pub use head::{part_prediction_targets, PartAttention, PartDescriptor, PartHead};
use nn::{ParamStore, Scope};

use crate::datamodel::KeypointSet;
use crate::error::{Error, Result};
use crate::geometry::{render_heatmaps, PartGrouping, DEFAULT_ALPHA_G};

/// Per-channel image normalisation applied before tokenization.
pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// No prompt tokenizer at all.
    Off,
    /// Positive keypoints only; negatives are dropped before rendering.
    PositiveOnly,
    /// Positives and negatives.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_parts: usize,
    /// Part embedding width (d).
    pub embed_dim: usize,
    pub encoder: EncoderConfig,
    pub prompts: PromptMode,
    /// Off: a single embedding pooled from all foreground tokens.
    pub part_based: bool,
    pub soft_pooling: bool,
    pub alpha_g: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 32,
            num_parts: 8,
            embed_dim: 64,
            encoder: EncoderConfig::default(),
            prompts: PromptMode::Full,
            part_based: true,
            soft_pooling: false,
            alpha_g: DEFAULT_ALPHA_G,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.height, self.width)?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        PartGrouping::for_parts(self.num_parts)?;
        if !(self.alpha_g > 0.0) {
            return Err(Error::Config(format!("alpha_g must be > 0, got {}", self.alpha_g)));
        }
        Ok(())
    }
}

/// Mode and randomness for one forward pass.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Batched network input.
pub struct ModelInput {
    /// `(B, H, W, 3)` normalised pixels.
    pub images: Tensor,
    /// `(B, H, W, K+1)` heatmaps, absent when no sample carries a prompt.
    pub prompts: Option<Tensor>,
    /// Which samples carry a prompt; the others take the image-only path.
    pub prompt_present: Vec<bool>,
}

pub struct ModelOutput {
    /// `(B, H', W', C_o)`.
    pub features: Tensor,
    pub grid: (usize, usize),
    pub head: head::HeadOutput,
}

pub struct KprModel {
    cfg: ModelConfig,
    grouping: PartGrouping,
    encoder: Encoder,
    head: PartHead,
    dtype: DType,
}

impl KprModel {
    pub fn new(scope: &Scope, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let prompt_channels = match cfg.prompts {
            PromptMode::Off => None,
            _ => Some(cfg.num_parts + 1),
        };
        let encoder = Encoder::new(
            &scope.pp("encoder"),
            &cfg.encoder,
            cfg.height,
            cfg.width,
            prompt_channels,
        )?;
        let head = PartHead::new(
            &scope.pp("head"),
            cfg.encoder.out_dim,
            cfg.num_parts,
            cfg.embed_dim,
            cfg.part_based,
            cfg.soft_pooling,
        )?;
        Ok(KprModel {
            cfg: cfg.clone(),
            grouping: PartGrouping::for_parts(cfg.num_parts)?,
            encoder,
            head,
            dtype: scope.dtype(),
        })
    }

    /// Fresh model with its own parameter store seeded from the config.
    pub fn build(cfg: &ModelConfig, dtype: DType) -> Result<(ParamStore, Self)> {
        let store = ParamStore::new(dtype, cfg.seed);
        let model = KprModel::new(&store.root().pp("model"), cfg)?;
        Ok((store, model))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grouping(&self) -> &PartGrouping {
        &self.grouping
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &PartHead {
        &self.head
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_embeddings(&self) -> usize {
        self.head.num_embeddings()
    }

    /// Normalises images and renders prompts. Every image must already be at
    /// the model input size.
    pub fn prepare_input(&self, items: &[(&RgbImage, Option<&KeypointSet>)]) -> Result<ModelInput> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut pixels = Vec::with_capacity(items.len() * h * w * 3);
        for (img, _) in items {
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::Shape(format!(
                    "image is {}x{}, model expects {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            pixels.extend(
                img.as_raw()
                    .iter()
                    .map(|&v| (v as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD),
            );
        }
        let images = Tensor::from_vec(pixels, (items.len(), h, w, 3), &Device::Cpu)?
            .to_dtype(self.dtype)?;
        let mut prompt_present = vec![false; items.len()];
        let mut prompts = None;
        if self.cfg.prompts != PromptMode::Off {
            let ch = self.cfg.num_parts + 1;
            let mut maps = vec![0f32; items.len() * h * w * ch];
            for (i, (_, kps)) in items.iter().enumerate() {
                let Some(kps) = kps else { continue };
                // No visible positive means no target was specified.
                if kps.visible_positives() == 0 {
                    continue;
                }
                let used = match self.cfg.prompts {
                    PromptMode::PositiveOnly => KeypointSet::new(kps.positives.clone(), Vec::new()),
                    _ => (*kps).clone(),
                };
                let hm = render_heatmaps(&used, &self.grouping, h, w, self.cfg.alpha_g)?;
                maps[i * h * w * ch..(i + 1) * h * w * ch].copy_from_slice(&hm.to_hwc());
                prompt_present[i] = true;
            }
            if prompt_present.iter().any(|&p| p) {
                prompts = Some(
                    Tensor::from_vec(maps, (items.len(), h, w, ch), &Device::Cpu)?
                        .to_dtype(self.dtype)?,
                );
            }
        }
        Ok(ModelInput {
            images,
            prompts,
            prompt_present,
        })
    }

    pub fn forward(&self, input: &ModelInput, ctx: &mut ForwardCtx) -> Result<ModelOutput> {
        let img = self.encoder.tokenize_image(&input.images)?;
        let prompt = match (&input.prompts, self.encoder.has_prompt_tokenizer()) {
            (Some(m), true) => {
                let tokens = self.encoder.tokenize_prompt(m)?;
                if input.prompt_present.iter().all(|&p| p) {
                    Some(tokens)
                } else {
                    let gate: Vec<f32> = input
                        .prompt_present
                        .iter()
                        .map(|&p| if p { 1.0 } else { 0.0 })
                        .collect();
                    let gate = Tensor::from_vec(gate, (input.prompt_present.len(), 1, 1, 1), &Device::Cpu)?
                        .to_dtype(self.dtype)?;
                    Some(tokens.broadcast_mul(&gate)?)
                }
            }
            _ => None,
        };
        let fused = encoder::fuse(&img, prompt.as_ref())?;
        let features = self.encoder.encode(&fused, ctx)?;
        let (b, gh, gw, c) = features.dims4()?;
        let tokens = features.reshape((b, gh * gw, c))?;
        let head = self.head.forward(&tokens, ctx.train)?;
        Ok(ModelOutput {
            features,
            grid: (gh, gw),
            head,
        })
    }

    /// Converts a forward output into per-sample descriptors.
    pub fn descriptors(&self, out: &ModelOutput, with_attention: bool) -> Result<Vec<PartDescriptor>> {
        let emb: Vec<Vec<Vec<f32>>> = out.head.embeddings.detach().to_dtype(DType::F32)?.to_vec3()?;
        let probs: Option<Vec<Vec<Vec<f32>>>> = if with_attention {
            Some(out.head.probs.detach().to_dtype(DType::F32)?.to_vec3()?)
        } else {
            None
        };
        let (gh, gw) = out.grid;
        Ok(emb
            .into_iter()
            .enumerate()
            .map(|(i, f)| PartDescriptor {
                f,
                v: out.head.visible[i].clone(),
                attention: probs.as_ref().map(|p| PartAttention {
                    height: gh,
                    width: gw,
                    classes: self.cfg.num_parts + 1,
                    probs: p[i].iter().flatten().copied().collect(),
                }),
            })
            .collect())
    }

    /// Evaluation-mode descriptors for a list of prompted images, processed
    /// in chunks of `batch_size`.
    pub fn describe(
        &self,
        items: &[(&RgbImage, Option<&KeypointSet>)],
        batch_size: usize,
        with_attention: bool,
    ) -> Result<Vec<PartDescriptor>> {
        let mut out = Vec::with_capacity(items.len());
        let mut ctx = ForwardCtx::eval();
        for chunk in items.chunks(batch_size.max(1)) {
            let input = self.prepare_input(chunk)?;
            let fwd = self.forward(&input, &mut ctx)?;
            out.extend(self.descriptors(&fwd, with_attention)?);
        }
        Ok(out)
    }
}
