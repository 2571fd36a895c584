//! Token-wise part classification and visibility-gated part pooling.

use candle_core::{DType, Module, Tensor};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::encoder::softmax_last;
use super::nn::{BatchNorm, Linear, Scope};
use crate::error::{Error, Result};

/// Per-token class probabilities over background + K parts, row-major grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAttention {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<f32>,
}

impl PartAttention {
    pub fn prob(&self, y: usize, x: usize, class: usize) -> f32 {
        self.probs[(y * self.width + x) * self.classes + class]
    }

    /// Argmax class per token; ties resolve to the lower class index.
    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .chunks(self.classes)
            .map(|row| argmax(row) as u32)
            .collect()
    }
}

/// Added after rectification so every embedding has a non-zero norm.
pub const EMBED_FLOOR: f64 = 1e-6;

/// Part embeddings and binary visibility. Invisible embeddings carry no
/// meaning and are never read by distances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartDescriptor {
    pub f: Vec<Vec<f32>>,
    pub v: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<PartAttention>,
}

impl PartDescriptor {
    pub fn num_parts(&self) -> usize {
        self.f.len()
    }

    pub fn dim(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Downsamples a parsing map to the token grid by majority vote over each
/// `cell x cell` block; ties go to the higher label.
pub fn part_prediction_targets(parsing: &GrayImage, num_parts: usize, cell: usize) -> Result<Vec<u32>> {
    let (w, h) = (parsing.width() as usize, parsing.height() as usize);
    if cell == 0 || h % cell != 0 || w % cell != 0 {
        return Err(Error::Shape(format!("parsing {h}x{w} is not divisible into {cell}px cells")));
    }
    let mut out = Vec::with_capacity((h / cell) * (w / cell));
    let mut votes = vec![0usize; num_parts + 1];
    for ty in 0..h / cell {
        for tx in 0..w / cell {
            votes.iter_mut().for_each(|v| *v = 0);
            for y in ty * cell..(ty + 1) * cell {
                for x in tx * cell..(tx + 1) * cell {
                    let l = parsing.get_pixel(x as u32, y as u32).0[0] as usize;
                    if l > num_parts {
                        return Err(Error::Invalid(format!(
                            "parsing label {l} at ({x},{y}) exceeds K={num_parts}"
                        )));
                    }
                    votes[l] += 1;
                }
            }
            let mut best = 0;
            for (l, &c) in votes.iter().enumerate() {
                if c >= votes[best] {
                    best = l;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

pub struct HeadOutput {
    /// `(B, N, K+1)`.
    pub logits: Tensor,
    pub probs: Tensor,
    /// Hard class per token, `B` rows of `N`.
    pub assignment: Vec<Vec<u32>>,
    /// `(B, P, d)`, `P = K` with part-based pooling, 1 otherwise.
    pub embeddings: Tensor,
    /// `(B, P)` 0/1 in the model dtype.
    pub visibility: Tensor,
    pub visible: Vec<Vec<bool>>,
}

pub struct PartHead {
    classifier: Linear,
    proj: Linear,
    bn: BatchNorm,
    num_parts: usize,
    part_based: bool,
    soft_pooling: bool,
}

impl PartHead {
    pub fn new(
        scope: &Scope,
        feat_dim: usize,
        num_parts: usize,
        embed_dim: usize,
        part_based: bool,
        soft_pooling: bool,
    ) -> Result<Self> {
        Ok(PartHead {
            classifier: Linear::new(&scope.pp("classifier"), feat_dim, num_parts + 1, true)?,
            proj: Linear::new(&scope.pp("proj"), feat_dim, embed_dim, true)?,
            bn: BatchNorm::new(&scope.pp("bn"), embed_dim)?,
            num_parts,
            part_based,
            soft_pooling,
        })
    }

    pub fn num_embeddings(&self) -> usize {
        if self.part_based {
            self.num_parts
        } else {
            1
        }
    }

    /// `(B, N, C)` tokens -> `(logits, probs)`, each `(B, N, K+1)`.
    pub fn classify_tokens(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let logits = self.classifier.forward(tokens)?;
        let probs = softmax_last(&logits)?;
        Ok((logits, probs))
    }

    pub fn forward(&self, tokens: &Tensor, train: bool) -> Result<HeadOutput> {
        let (b, n, _) = tokens.dims3()?;
        let k1 = self.num_parts + 1;
        let (logits, probs) = self.classify_tokens(tokens)?;
        let flat: Vec<f32> = probs.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let assignment: Vec<Vec<u32>> = flat
            .chunks(n * k1)
            .map(|img| img.chunks(k1).map(|row| argmax(row) as u32).collect())
            .collect();
        let dtype = tokens.dtype();
        let dev = tokens.device();

        // Hard membership (B, N, G) where G = K groups, or one foreground group.
        let groups = self.num_embeddings();
        let mut member = vec![0f32; b * n * groups];
        let mut counts = vec![0f32; b * groups];
        for (bi, row) in assignment.iter().enumerate() {
            for (ni, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let g = if self.part_based { c as usize - 1 } else { 0 };
                member[(bi * n + ni) * groups + g] = 1.0;
                counts[bi * groups + g] += 1.0;
            }
        }
        let visible: Vec<Vec<bool>> = counts
            .chunks(groups)
            .map(|c| c.iter().map(|&v| v > 0.0).collect())
            .collect();
        let visibility = Tensor::from_vec(
            counts.iter().map(|&c| if c > 0.0 { 1f32 } else { 0.0 }).collect::<Vec<_>>(),
            (b, groups),
            dev,
        )?
        .to_dtype(dtype)?;

        let weights = if self.soft_pooling {
            if self.part_based {
                probs.narrow(2, 1, self.num_parts)?
            } else {
                (1.0 - probs.narrow(2, 0, 1)?)?
            }
        } else {
            Tensor::from_vec(member, (b, n, groups), dev)?.to_dtype(dtype)?
        };
        let sums = weights.transpose(1, 2)?.contiguous()?.matmul(tokens)?; // (B, G, C)
        let mass = weights.sum(1)?; // (B, G)
        let mass = if self.soft_pooling {
            mass.clamp(1e-12, f64::MAX)?
        } else {
            mass.clamp(1.0, f64::MAX)?
        };
        let pooled = sums.broadcast_div(&mass.unsqueeze(2)?)?;

        let c = pooled.dims()[2];
        let rows = pooled.reshape((b * groups, c))?;
        let mask = visibility.reshape(b * groups)?;
        let z = self.proj.forward(&rows)?;
        let z = (self.bn.forward(&z, Some(&mask), train)?.relu()? + EMBED_FLOOR)?;
        let d = z.dims()[1];
        let embeddings = z.reshape((b, groups, d))?;
        Ok(HeadOutput {
            logits,
            probs,
            assignment,
            embeddings,
            visibility,
            visible,
        })
    }
}
