//! Patch tokenizers, token fusion and the multi-stage fusion (MSF) encoder.
//!
//! Token grids are channel-last tensors `(B, H_t, W_t, C)`.

use candle_core::{DType, Device, Module, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Init, LayerNorm, Linear, Scope};
use super::ForwardCtx;
use crate::error::{Error, Result};

pub const PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Local windows, shifted by half a window on every other block.
    Windowed,
    /// Every token attends to every token of its stage.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Token width after the tokenizers (C_i).
    pub in_dim: usize,
    /// Output feature width (C_o).
    pub out_dim: usize,
    pub stages: Vec<StageConfig>,
    pub attention: AttentionKind,
    pub mlp_ratio: usize,
    pub drop_path: f32,
    /// Off: only the last stage is projected, at its own resolution.
    pub msf: bool,
    /// Learned absolute position embedding added to the image tokens.
    #[serde(default = "default_true")]
    pub abs_pos: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_dim: 32,
            out_dim: 128,
            stages: vec![
                StageConfig { depth: 2, heads: 2, window: 4 },
                StageConfig { depth: 2, heads: 4, window: 4 },
            ],
            attention: AttentionKind::Windowed,
            mlp_ratio: 2,
            drop_path: 0.0,
            msf: true,
            abs_pos: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if height % PATCH != 0 || width % PATCH != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} is not divisible by the {PATCH}px patch"
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop_path {} outside [0,1)", self.drop_path)));
        }
        let (gh, gw) = (height / PATCH, width / PATCH);
        let f = 1usize << (self.stages.len() - 1);
        if gh % f != 0 || gw % f != 0 {
            return Err(Error::Shape(format!(
                "token grid {gh}x{gw} not divisible by 2^{} for {} stages",
                self.stages.len() - 1,
                self.stages.len()
            )));
        }
        for (s, st) in self.stages.iter().enumerate() {
            let c = self.in_dim << s;
            if st.depth == 0 || st.heads == 0 || c % st.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: width {c} is not divisible into {} heads (depth {})",
                    st.heads, st.depth
                )));
            }
            if self.attention == AttentionKind::Windowed {
                let (sh, sw) = (gh >> s, gw >> s);
                let (wh, ww) = (st.window.min(sh), st.window.min(sw));
                if wh == 0 || sh % wh != 0 || sw % ww != 0 {
                    return Err(Error::Config(format!(
                        "stage {s}: window {} does not tile the {sh}x{sw} grid",
                        st.window
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-stochastic matrix `(out, in)` of 1-D linear interpolation weights with
/// half-pixel centres: output index `o` samples the input at
/// `max(0, (o + 0.5) * in / out - 0.5)`, clamped at the last sample.
pub fn bilinear_weights(out: usize, input: usize) -> Vec<Vec<f64>> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let mut row = vec![0.0; input];
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = src - i0 as f64;
            row[i0] += 1.0 - t;
            row[i1] += t;
            row
        })
        .collect()
}

fn matrix(rows: &[Vec<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, c) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (r, c), device)?.to_dtype(dtype)?)
}

/// Resizes a `(B, h, w, C)` grid to `(B, out_h, out_w, C)` by separable
/// interpolation matrices.
pub fn upsample(x: &Tensor, ry: &Tensor, rx: &Tensor) -> Result<Tensor> {
    let t = x.permute((0, 3, 1, 2))?.contiguous()?; // B C h w
    let t = t.broadcast_matmul(&rx.t()?)?; // B C h W
    let t = ry.broadcast_matmul(&t)?; // B C H W
    Ok(t.permute((0, 2, 3, 1))?.contiguous()?)
}

/// `(B, H, W, C)` -> `(B, H/4, W/4, 16C)`, patch-major then channel.
pub fn patchify(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} input is not divisible by the {PATCH}px patch"
        )));
    }
    let t = x
        .reshape((b, h / PATCH, PATCH, w / PATCH, PATCH, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?;
    Ok(t.reshape((b, h / PATCH, w / PATCH, PATCH * PATCH * c))?)
}

/// Sum fusion; an absent prompt leaves the image tokens untouched.
pub fn fuse(image: &Tensor, prompt: Option<&Tensor>) -> Result<Tensor> {
    match prompt {
        None => Ok(image.clone()),
        Some(p) if p.dims() != image.dims() => Err(Error::Shape(format!(
            "prompt tokens {:?} vs image tokens {:?}",
            p.dims(),
            image.dims()
        ))),
        Some(p) => Ok((image + p)?),
    }
}

/// Softmax over the last dimension from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    window: (usize, usize),
    shift: (usize, usize),
    rel_table: Tensor,
    rel_index: Tensor,
    mask: Option<Tensor>,
    drop_path: f32,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    fn new(
        scope: &Scope,
        dim: usize,
        heads: usize,
        grid: (usize, usize),
        window: (usize, usize),
        shift: (usize, usize),
        mlp_ratio: usize,
        drop_path: f32,
    ) -> Result<Self> {
        let (wh, ww) = window;
        let t = wh * ww;
        let table_len = (2 * wh - 1) * (2 * ww - 1);
        let rel_table = scope.param("rel_bias", &[table_len, heads], Init::TruncNormal(0.02))?;
        let mut idx = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                let dy = (i / ww) as isize - (j / ww) as isize + wh as isize - 1;
                let dx = (i % ww) as isize - (j % ww) as isize + ww as isize - 1;
                idx.push((dy as usize * (2 * ww - 1) + dx as usize) as u32);
            }
        }
        let device = scope.device();
        let rel_index = Tensor::from_vec(idx, t * t, device)?;
        let mask = if shift != (0, 0) {
            Some(shift_mask(grid, window, shift, scope.dtype(), device)?)
        } else {
            None
        };
        let hidden = dim * mlp_ratio;
        Ok(Block {
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            qkv: Linear::new(&scope.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim, true)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            fc1: Linear::new(&scope.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, dim, true)?,
            heads,
            window,
            shift,
            rel_table,
            rel_index,
            mask,
            drop_path,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, gh, gw, c) = x.dims4()?;
        let (wh, ww) = self.window;
        let (sh, sw) = self.shift;
        let mut x = x.clone();
        if sh > 0 {
            x = x.roll(-(sh as i32), 1)?;
        }
        if sw > 0 {
            x = x.roll(-(sw as i32), 2)?;
        }
        let (nh, nw) = (gh / wh, gw / ww);
        let n_win = nh * nw;
        let t = wh * ww;
        let win = x
            .reshape((b, nh, wh, nw, ww, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * n_win, t, c))?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&win)?
            .reshape((b * n_win, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = (qkv.get(0)? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let mut attn = q.matmul(&k.t()?)?; // (bW, heads, t, t)
        let bias = self
            .rel_table
            .index_select(&self.rel_index, 0)?
            .reshape((t, t, self.heads))?
            .permute((2, 0, 1))?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = &self.mask {
            attn = attn
                .reshape((b, n_win, self.heads, t, t))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((b * n_win, self.heads, t, t))?;
        }
        let attn = softmax_last(&attn)?;
        let out = attn
            .matmul(&v.contiguous()?)?
            .transpose(1, 2)?
            .reshape((b * n_win, t, c))?;
        let out = self.proj.forward(&out)?;
        let mut out = out
            .reshape((b, nh, nw, wh, ww, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, gh, gw, c))?;
        if sh > 0 {
            out = out.roll(sh as i32, 1)?;
        }
        if sw > 0 {
            out = out.roll(sw as i32, 2)?;
        }
        Ok(out)
    }

    fn residual(&self, x: &Tensor, branch: Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if !ctx.train || self.drop_path <= 0.0 {
            return Ok((x + branch)?);
        }
        let b = x.dims()[0];
        let keep = 1.0 - self.drop_path as f64;
        let mask: Vec<f64> = (0..b)
            .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (b, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
        Ok((x + branch.broadcast_mul(&mask)?)?)
    }

    fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let a = self.attention(&self.norm1.forward(x)?)?;
        let x = self.residual(x, a, ctx)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        self.residual(&x, m, ctx)
    }
}

/// Additive mask `(n_windows, t, t)` that keeps shifted windows from mixing
/// tokens that were not adjacent before the cyclic roll.
fn shift_mask(
    grid: (usize, usize),
    window: (usize, usize),
    shift: (usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (gh, gw) = grid;
    let (wh, ww) = window;
    let region = |p: usize, n: usize, w: usize, s: usize| -> usize {
        if s == 0 || p < n - w {
            0
        } else if p < n - s {
            1
        } else {
            2
        }
    };
    let label = |y: usize, x: usize| region(y, gh, wh, shift.0) * 3 + region(x, gw, ww, shift.1);
    let (nh, nw) = (gh / wh, gw / ww);
    let t = wh * ww;
    let mut out = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|i| label(wy * wh + i / ww, wx * ww + i % ww))
                .collect();
            for i in 0..t {
                for j in 0..t {
                    out.push(if labels[i] == labels[j] { 0.0f64 } else { -100.0 });
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (nh * nw, t, t), device)?.to_dtype(dtype)?)
}

struct PatchMerge {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let t = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        Ok(self.reduce.forward(&self.norm.forward(&t)?)?)
    }
}

struct Stage {
    merge: Option<PatchMerge>,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

pub struct Encoder {
    cfg: EncoderConfig,
    grid: (usize, usize),
    prompt_channels: usize,
    image_embed: Linear,
    image_norm: LayerNorm,
    pos_embed: Option<Tensor>,
    prompt_embed: Option<Linear>,
    stages: Vec<Stage>,
    out_proj: Linear,
    /// Interpolation matrices per stage (rows, cols); `None` at full resolution.
    resize: Vec<Option<(Tensor, Tensor)>>,
}

impl Encoder {
    /// `prompt_channels = None` builds an encoder with no prompt tokenizer.
    pub fn new(
        scope: &Scope,
        cfg: &EncoderConfig,
        height: usize,
        width: usize,
        prompt_channels: Option<usize>,
    ) -> Result<Self> {
        cfg.validate(height, width)?;
        let grid = (height / PATCH, width / PATCH);
        let ci = cfg.in_dim;
        let image_embed = Linear::new(&scope.pp("image_embed"), PATCH * PATCH * 3, ci, true)?;
        let image_norm = LayerNorm::new(&scope.pp("image_norm"), ci)?;
        let pos_embed = if cfg.abs_pos {
            Some(scope.param("pos_embed", &[1, grid.0, grid.1, ci], Init::TruncNormal(0.02))?)
        } else {
            None
        };
        let prompt_embed = match prompt_channels {
            Some(ch) => Some(Linear::with_init(
                &scope.pp("prompt_embed"),
                PATCH * PATCH * ch,
                ci,
                true,
                Init::Zeros,
            )?),
            None => None,
        };
        let mut stages = Vec::new();
        let mut resize = Vec::new();
        let mut concat = 0;
        for (s, st) in cfg.stages.iter().enumerate() {
            let sc = scope.pp(format!("stage{s}"));
            let dim = ci << s;
            let sgrid = (grid.0 >> s, grid.1 >> s);
            let merge = if s == 0 {
                None
            } else {
                Some(PatchMerge {
                    norm: LayerNorm::new(&sc.pp("merge_norm"), 2 * dim)?,
                    reduce: Linear::new(&sc.pp("merge"), 2 * dim, dim, false)?,
                })
            };
            let window = match cfg.attention {
                AttentionKind::Full => sgrid,
                AttentionKind::Windowed => (st.window.min(sgrid.0), st.window.min(sgrid.1)),
            };
            let mut blocks = Vec::new();
            for d in 0..st.depth {
                let shift = if cfg.attention == AttentionKind::Windowed && d % 2 == 1 {
                    (
                        if window.0 < sgrid.0 { window.0 / 2 } else { 0 },
                        if window.1 < sgrid.1 { window.1 / 2 } else { 0 },
                    )
                } else {
                    (0, 0)
                };
                blocks.push(Block::new(
                    &sc.pp(format!("block{d}")),
                    dim,
                    st.heads,
                    sgrid,
                    window,
                    shift,
                    cfg.mlp_ratio,
                    cfg.drop_path,
                )?);
            }
            stages.push(Stage {
                merge,
                blocks,
                norm: LayerNorm::new(&sc.pp("norm"), dim)?,
            });
            if cfg.msf {
                concat += dim;
                resize.push(if s == 0 {
                    None
                } else {
                    let (dt, dev) = (scope.dtype(), scope.device());
                    Some((
                        matrix(&bilinear_weights(grid.0, sgrid.0), dt, dev)?,
                        matrix(&bilinear_weights(grid.1, sgrid.1), dt, dev)?,
                    ))
                });
            }
        }
        if !cfg.msf {
            concat = ci << (cfg.stages.len() - 1);
        }
        let out_proj = Linear::new(&scope.pp("out_proj"), concat, cfg.out_dim, true)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            grid,
            prompt_channels: prompt_channels.unwrap_or(0),
            image_embed,
            image_norm,
            pos_embed,
            prompt_embed,
            stages,
            out_proj,
            resize,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Token grid of the tokenizers.
    pub fn token_grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Grid of the encoder output.
    pub fn output_grid(&self) -> (usize, usize) {
        if self.cfg.msf {
            self.grid
        } else {
            let s = self.cfg.stages.len() - 1;
            (self.grid.0 >> s, self.grid.1 >> s)
        }
    }

    pub fn has_prompt_tokenizer(&self) -> bool {
        self.prompt_embed.is_some()
    }

    pub fn prompt_embed(&self) -> Option<&Linear> {
        self.prompt_embed.as_ref()
    }

    /// `(B, H, W, 3)` normalised image -> `(B, H/4, W/4, C_i)`.
    pub fn tokenize_image(&self, images: &Tensor) -> Result<Tensor> {
        let p = patchify(images)?;
        let (_, gh, gw, _) = p.dims4()?;
        if (gh, gw) != self.grid {
            return Err(Error::Shape(format!(
                "image token grid {gh}x{gw}, model expects {}x{}",
                self.grid.0, self.grid.1
            )));
        }
        let t = self.image_norm.forward(&self.image_embed.forward(&p)?)?;
        Ok(match &self.pos_embed {
            Some(pos) => t.broadcast_add(pos)?,
            None => t,
        })
    }

    /// `(B, H, W, K+1)` heatmaps -> `(B, H/4, W/4, C_i)`.
    pub fn tokenize_prompt(&self, heatmaps: &Tensor) -> Result<Tensor> {
        let embed = self
            .prompt_embed
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a prompt tokenizer".into()))?;
        let ch = heatmaps.dims().last().copied().unwrap_or(0);
        if ch != self.prompt_channels {
            return Err(Error::Shape(format!(
                "prompt has {ch} channels, model expects {}",
                self.prompt_channels
            )));
        }
        Ok(embed.forward(&patchify(heatmaps)?)?)
    }

    /// Runs the stages on fused tokens and returns `(B, H', W', C_o)`.
    pub fn encode(&self, tokens: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut x = tokens.clone();
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(&x)?;
            }
            for block in &stage.blocks {
                x = block.forward(&x, ctx)?;
            }
            outs.push(stage.norm.forward(&x)?);
        }
        if !self.cfg.msf {
            return Ok(self.out_proj.forward(outs.last().expect("one stage"))?);
        }
        let mut parts = Vec::with_capacity(outs.len());
        for (o, r) in outs.iter().zip(&self.resize) {
            parts.push(match r {
                None => o.clone(),
                Some((ry, rx)) => upsample(o, ry, rx)?,
            });
        }
        let cat = Tensor::cat(&parts, 3)?;
        Ok(self.out_proj.forward(&cat)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nn::ParamStore;

    #[test]
    fn two_to_four_interpolation_golden() {
        let w = bilinear_weights(4, 2);
        let expect = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for (row, e) in w.iter().zip(expect) {
            assert_eq!(row.as_slice(), e.as_slice());
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (o, i) in [(16, 8), (16, 4), (8, 8), (7, 3)] {
            for row in bilinear_weights(o, i) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_stage_grids_and_output_size() {
        let store = ParamStore::new(DType::F32, 0);
        let cfg = EncoderConfig {
            in_dim: 8,
            out_dim: 12,
            stages: vec![
                StageConfig { depth: 1, heads: 1, window: 4 },
                StageConfig { depth: 2, heads: 2, window: 4 },
                StageConfig { depth: 1, heads: 2, window: 4 },
            ],
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(&store.root(), &cfg, 64, 32, Some(9)).unwrap();
        let img = Tensor::zeros((2, 64, 32, 3), DType::F32, &Device::Cpu).unwrap();
        let tok = enc.tokenize_image(&img).unwrap();
        assert_eq!(tok.dims(), &[2, 16, 8, 8]);
        let out = enc.encode(&tok, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.dims(), &[2, 16, 8, 12]);
    }

    #[test]
    fn grid_not_divisible_by_stage_factor_is_rejected() {
        let cfg = EncoderConfig {
            stages: vec![
                StageConfig { depth: 1, heads: 1, window: 2 },
                StageConfig { depth: 1, heads: 1, window: 2 },
                StageConfig { depth: 1, heads: 1, window: 2 },
            ],
            ..EncoderConfig::default()
        };
        assert!(cfg.validate(24, 12).is_err());
        assert!(cfg.validate(30, 32).is_err());
    }

    #[test]
    fn patchify_is_local() {
        let data: Vec<f32> = (0..8 * 8).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data, (1, 8, 8, 1), &Device::Cpu).unwrap();
        let p = patchify(&x).unwrap().squeeze(0).unwrap();
        let cell: Vec<f32> = p.get(1).unwrap().get(0).unwrap().to_vec1().unwrap();
        let expect: Vec<f32> = (0..4)
            .flat_map(|r| (0..4).map(move |c| ((4 + r) * 8 + c) as f32))
            .collect();
        assert_eq!(cell, expect);
    }

    #[test]
    fn shift_mask_blocks_wrapped_tokens() {
        let m = shift_mask((8, 8), (4, 4), (2, 2), DType::F64, &Device::Cpu).unwrap();
        let m: Vec<Vec<Vec<f64>>> = m.to_vec3().unwrap();
        // Top-left window never wraps.
        assert!(m[0].iter().flatten().all(|&v| v == 0.0));
        // Bottom-right window mixes four regions.
        let last = &m[3];
        assert_eq!(last[0][0], 0.0);
        assert_eq!(last[0][15], -100.0);
    }
}
