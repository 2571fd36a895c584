//! Training augmentations that keep image, prompt and parsing in agreement:
//! random crop with padding, random erasing, and batch-wise inter-person
//! occlusion (BIPO).

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Keypoint, Sample};

pub const DEFAULT_BIPO_P: f64 = 0.3;
pub const DEFAULT_ERASE_P: f64 = 0.5;
pub const DEFAULT_PAD: usize = 10;

/// Occluder placement ranges, as fractions of the target size.
pub const BIPO_SHIFT_X: f64 = 0.5;
pub const BIPO_SHIFT_Y: f64 = 0.25;
pub const BIPO_SCALE: (f64, f64) = (0.7, 1.1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct BipoResult {
    pub sample: Sample,
    pub applied: bool,
    /// The draw fired but the batch held no other identity.
    pub no_occluder: bool,
    /// Pasted mask bounding box `(x0, y0, x1, y1)`, inclusive, when applied.
    pub mask_bbox: Option<(usize, usize, usize, usize)>,
}

/// Seeded entry point; see [`bipo_with_rng`].
pub fn bipo(sample: &Sample, batch: &[Sample], p: f64, seed: u64) -> BipoResult {
    bipo_with_rng(sample, batch, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// With probability `p`, pastes a different-identity batch member over the
/// sample, cut out by its parsing foreground.
pub fn bipo_with_rng<R: Rng>(sample: &Sample, batch: &[Sample], p: f64, rng: &mut R) -> BipoResult {
    let unchanged = |no_occluder| BipoResult {
        sample: sample.clone(),
        applied: false,
        no_occluder,
        mask_bbox: None,
    };
    if !(rng.random::<f64>() < p) {
        return unchanged(false);
    }
    let candidates: Vec<&Sample> = batch.iter().filter(|s| s.identity != sample.identity).collect();
    if candidates.is_empty() {
        log::warn!("BIPO skipped for {}: no other identity in batch", sample.id);
        return unchanged(true);
    }
    let occluder = candidates[rng.random_range(0..candidates.len())];
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    let placement = Placement {
        dx: rng.random_range(-BIPO_SHIFT_X * w..=BIPO_SHIFT_X * w),
        dy: rng.random_range(-BIPO_SHIFT_Y * h..=BIPO_SHIFT_Y * h),
        scale: rng.random_range(BIPO_SCALE.0..=BIPO_SCALE.1),
    };
    let (out, bbox) = paste_occluder(sample, occluder, placement);
    BipoResult {
        applied: bbox.is_some(),
        sample: out,
        no_occluder: false,
        mask_bbox: bbox,
    }
}

/// Occluder point `(x, y)` in target coordinates under `pl`: the occluder is
/// scaled about its centre and its centre moved to the target centre plus
/// `(dx, dy)`.
pub fn to_target(pl: Placement, occ: (f64, f64), tgt: (f64, f64), x: f64, y: f64) -> (f64, f64) {
    (
        tgt.0 / 2.0 + pl.dx + pl.scale * (x - occ.0 / 2.0),
        tgt.1 / 2.0 + pl.dy + pl.scale * (y - occ.1 / 2.0),
    )
}

/// Deterministic paste used by [`bipo`]. Returns the augmented sample and the
/// pasted-mask bounding box (`None` when nothing landed in frame).
pub fn paste_occluder(
    sample: &Sample,
    occluder: &Sample,
    pl: Placement,
) -> (Sample, Option<(usize, usize, usize, usize)>) {
    let (w, h) = (sample.width(), sample.height());
    let (ow, oh) = (occluder.width() as f64, occluder.height() as f64);
    let mut out = sample.clone();
    let mut covered = vec![false; w * h];
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            // Inverse map of the pixel centre, nearest-neighbour sampling.
            let sx = (x as f64 + 0.5 - w as f64 / 2.0 - pl.dx) / pl.scale + ow / 2.0;
            let sy = (y as f64 + 0.5 - h as f64 / 2.0 - pl.dy) / pl.scale + oh / 2.0;
            if sx < 0.0 || sy < 0.0 || sx >= ow || sy >= oh {
                continue;
            }
            let (sx, sy) = (sx as u32, sy as u32);
            if occluder.parsing.get_pixel(sx, sy).0[0] == 0 {
                continue;
            }
            covered[y * w + x] = true;
            out.image.put_pixel(x as u32, y as u32, *occluder.image.get_pixel(sx, sy));
            out.parsing.put_pixel(x as u32, y as u32, Luma([0]));
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    let Some((bx0, by0, bx1, by1)) = bbox else {
        return (sample.clone(), None);
    };
    for k in out.keypoints.positives.iter_mut() {
        if let Some((px, py)) = k.visible.then(|| k.pixel(h, w)).flatten() {
            if covered[py * w + px] {
                k.visible = false;
            }
        }
    }
    for k in occluder.keypoints.positives.iter().filter(|k| k.visible) {
        let (tx, ty) = to_target(pl, (ow, oh), (w as f64, h as f64), k.x as f64, k.y as f64);
        let inside = tx >= bx0 as f64 && ty >= by0 as f64 && tx < (bx1 + 1) as f64 && ty < (by1 + 1) as f64;
        if inside {
            out.keypoints.negatives.push(Keypoint {
                x: tx as f32,
                y: ty as f32,
                ..*k
            });
        }
    }
    (out, Some((bx0, by0, bx1, by1)))
}

/// With probability `p`, fills a random rectangle (2%–40% of the area,
/// aspect 0.3–3.3) with noise. Keypoints and parsing are left as they are.
pub fn random_erasing<R: Rng>(sample: &Sample, p: f64, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    if !(rng.random::<f64>() < p) {
        return out;
    }
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    for _ in 0..100 {
        let area = rng.random_range(0.02..0.4) * w * h;
        let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h as usize || ew >= w as usize {
            continue;
        }
        let y0 = rng.random_range(0..=h as usize - eh);
        let x0 = rng.random_range(0..=w as usize - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                let px = Rgb([rng.random(), rng.random(), rng.random()]);
                out.image.put_pixel(x as u32, y as u32, px);
            }
        }
        break;
    }
    out
}

/// Shift of the content after padding by `pad` and cropping back to the
/// original size at offset `(ox, oy)` in the padded frame.
pub fn crop_shift(sample: &Sample, pad: usize, ox: usize, oy: usize) -> Sample {
    let (w, h) = (sample.width(), sample.height());
    let dx = ox as i64 - pad as i64;
    let dy = oy as i64 - pad as i64;
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut parsing = GrayImage::new(w as u32, h as u32);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sx, sy) = (x + dx, y + dy);
            if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                image.put_pixel(x as u32, y as u32, *sample.image.get_pixel(sx as u32, sy as u32));
                parsing.put_pixel(x as u32, y as u32, *sample.parsing.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    let mut keypoints = sample.keypoints.clone();
    for k in keypoints.positives.iter_mut().chain(keypoints.negatives.iter_mut()) {
        k.x -= dx as f32;
        k.y -= dy as f32;
    }
    keypoints.clip_to(h, w);
    Sample {
        image,
        parsing,
        keypoints,
        ..sample.clone()
    }
}

/// Zero-pads by `pad` on every side and crops a random window of the
/// original size, moving keypoints and parsing with the pixels.
pub fn random_crop_pad<R: Rng>(sample: &Sample, pad: usize, rng: &mut R) -> Sample {
    if pad == 0 {
        return sample.clone();
    }
    let ox = rng.random_range(0..=2 * pad);
    let oy = rng.random_range(0..=2 * pad);
    crop_shift(sample, pad, ox, oy)
}
