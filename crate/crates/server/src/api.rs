//! Request and response bodies, and the checks that turn a raw request into
//! model inputs.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::imageops::FilterType;
use image::{ImageFormat, ImageReader, RgbImage};
use kpr::datamodel::{Keypoint, KeypointSet, NUM_JOINTS};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Largest accepted decoded image side, in pixels.
pub const MAX_IMAGE_SIDE: u32 = 2048;

/// Default number of retrieval results.
pub const DEFAULT_TOP_K: usize = 10;

/// Keypoints are `[x, y, joint_id]` in the pixel frame of the uploaded image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub image: String,
    #[serde(default)]
    pub positives: Vec<Vec<f64>>,
    #[serde(default)]
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub f: Vec<Vec<f32>>,
    pub v: Vec<bool>,
    /// Base64 PNG of the input with the argmax part map blended on top.
    pub attention: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query: EmbedRequest,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub sample_id: String,
    pub distance: f64,
    pub identity: u32,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRequest {
    pub dataset_root: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildResponse {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub index_size: Option<usize>,
}

pub fn thumbnail_url(sample_id: &str) -> String {
    format!("/gallery/{sample_id}/thumbnail")
}

pub fn parse_json<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// Decodes the base64 PNG, rejecting images larger than [`MAX_IMAGE_SIDE`]
/// before the pixels are decoded.
pub fn decode_image(b64: &str) -> Result<RgbImage, ApiError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image: invalid base64 ({e})")))?;
    let reader = || ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png);
    let (w, h) = reader()
        .into_dimensions()
        .map_err(|e| ApiError::bad_request(format!("image: not a PNG ({e})")))?;
    if w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
        return Err(ApiError::too_large(format!(
            "image is {w}x{h}, the largest accepted side is {MAX_IMAGE_SIDE}"
        )));
    }
    if w == 0 || h == 0 {
        return Err(ApiError::bad_request("image: empty".to_string()));
    }
    let img = reader()
        .decode()
        .map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    Ok(img.to_rgb8())
}

fn parse_keypoint(field: &str, i: usize, raw: &[f64], height: u32, width: u32) -> Result<Keypoint, ApiError> {
    let at = format!("{field}[{i}]");
    let &[x, y, j] = raw else {
        return Err(ApiError::bad_request(format!(
            "{at}: expected [x, y, joint_id], got {} values",
            raw.len()
        )));
    };
    if !x.is_finite() || !y.is_finite() {
        return Err(ApiError::bad_request(format!("{at}: coordinates must be finite")));
    }
    if j.fract() != 0.0 || j < 0.0 || j >= NUM_JOINTS as f64 {
        return Err(ApiError::bad_request(format!(
            "{at}: joint_id={j} outside the integers [0, {NUM_JOINTS})"
        )));
    }
    let kp = Keypoint::new(x as f32, y as f32, j as u8);
    if !kp.in_bounds(height as usize, width as usize) {
        return Err(ApiError::bad_request(format!(
            "{at}: ({x}, {y}) outside the {width}x{height} image"
        )));
    }
    Ok(kp)
}

/// Validated prompt in uploaded-image coordinates. `None` when no keypoint
/// was given, which is the prompt-free request.
pub fn parse_prompt(req: &EmbedRequest, height: u32, width: u32) -> Result<Option<KeypointSet>, ApiError> {
    let parse = |field: &str, list: &[Vec<f64>]| {
        list.iter()
            .enumerate()
            .map(|(i, raw)| parse_keypoint(field, i, raw, height, width))
            .collect::<Result<Vec<_>, _>>()
    };
    let pos = parse("positives", &req.positives)?;
    let neg = parse("negatives", &req.negatives)?;
    if pos.is_empty() && neg.is_empty() {
        return Ok(None);
    }
    Ok(Some(KeypointSet::new(pos, neg)))
}

/// Resizes to the model input and maps keypoints into the resized frame.
pub fn to_model_frame(img: &RgbImage, prompt: Option<KeypointSet>, height: usize, width: usize) -> (RgbImage, Option<KeypointSet>) {
    let (w0, h0) = img.dimensions();
    if (h0 as usize, w0 as usize) == (height, width) {
        return (img.clone(), prompt);
    }
    let resized = image::imageops::resize(img, width as u32, height as u32, FilterType::Triangle);
    let (sx, sy) = (width as f32 / w0 as f32, height as f32 / h0 as f32);
    let scale = |ks: Vec<Keypoint>| {
        ks.into_iter()
            .map(|k| Keypoint { x: k.x * sx, y: k.y * sy, ..k })
            .collect::<Vec<_>>()
    };
    let prompt = prompt.map(|p| {
        let mut p = KeypointSet::new(scale(p.positives), scale(p.negatives));
        p.clip_to(height, width);
        p
    });
    (resized, prompt)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ApiError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn encode_png_base64(img: &RgbImage) -> Result<String, ApiError> {
    Ok(STANDARD.encode(encode_png(img)?))
}
