//! Synthetic two-person crossing sequences with ground-truth detections.
//!
//! Two identities walk towards each other along the same row, meet, stand
//! with the rear one completely hidden for `hidden_frames` frames, then carry
//! on past each other. Detection boxes are the ground-truth figure extents
//! padded to the model aspect ratio.

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{Appearance, Pose};
use super::synth::{derive_seed, identity_appearance, random_background, Scene};
use super::Keypoint;
use crate::error::{Error, Result};
use crate::tracker::{BBox, Detection, LabeledBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingConfig {
    pub height: usize,
    pub width: usize,
    /// Frames walked before the two figures meet.
    pub approach_frames: usize,
    pub hidden_frames: usize,
    /// Horizontal speed of each figure, pixels per frame.
    pub speed: f32,
    /// Box height over box width.
    pub box_aspect: f32,
    /// Fewer visible joints than this and the person is not detected.
    pub min_visible_joints: usize,
    /// Seed of the identity appearances (use the dataset seed to reuse its
    /// identities).
    pub appearance_seed: u64,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        CrossingConfig {
            height: 80,
            width: 160,
            approach_frames: 8,
            hidden_frames: 3,
            speed: 4.0,
            box_aspect: 2.0,
            min_visible_joints: 3,
            appearance_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingSequence {
    pub frames: Vec<RgbImage>,
    pub detections: Vec<Vec<Detection>>,
    /// Ground-truth boxes labelled with the identity, aligned with
    /// `detections`.
    pub ground_truth: Vec<Vec<LabeledBox>>,
}

impl CrossingSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn person_box(pose: &Pose, aspect: f32, height: usize, width: usize) -> BBox {
    let ([x0, x1], [y0, y1]) = pose.bounds();
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let mut h = (y1 - y0).max(aspect * (x1 - x0));
    h = h.min(height as f32);
    let w = (h / aspect).min(width as f32);
    let x = (cx - w / 2.0).clamp(0.0, width as f32 - w);
    let y = (cy - h / 2.0).clamp(0.0, height as f32 - h);
    BBox { x, y, w, h }
}

/// Renders the crossing of identities `a` and `b`; `seed` drives poses,
/// background and which figure passes in front.
pub fn crossing_sequence(cfg: &CrossingConfig, a: u32, b: u32, seed: u64) -> Result<CrossingSequence> {
    if a == b {
        return Err(Error::Invalid("crossing needs two distinct identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4, a as u64, b as u64]));
    let looks: [Appearance; 2] = [identity_appearance(cfg.appearance_seed, a), identity_appearance(cfg.appearance_seed, b)];
    let ids = [a, b];
    let (h, w) = (cfg.height as f32, cfg.width as f32);
    let background = random_background(&mut rng, cfg.height, cfg.width);
    let front = rng.random_range(0..2usize);
    let body_h = [h * rng.random_range(0.78..0.84), h * rng.random_range(0.78..0.84)];
    let base_y = h * 0.95;
    let meet = w / 2.0;
    let n = 2 * cfg.approach_frames + cfg.hidden_frames;

    let mut frames = Vec::with_capacity(n);
    let mut detections = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    for t in 0..n {
        // Signed distance from the meeting point, zero while hidden.
        let off = if t < cfg.approach_frames {
            (cfg.approach_frames - t) as f32 * cfg.speed
        } else if t < cfg.approach_frames + cfg.hidden_frames {
            0.0
        } else {
            -((t + 1 - cfg.approach_frames - cfg.hidden_frames) as f32) * cfg.speed
        };
        let xs = [meet - off, meet + off];
        let hidden = off == 0.0;
        let poses: Vec<Pose> = (0..2)
            .map(|i| {
                let y = base_y + rng.random_range(-1.0..1.0);
                Pose::sample(&mut rng, xs[i], y, body_h[i])
            })
            .collect();
        let back = 1 - front;
        let mut order: Vec<usize> = vec![back, front];
        if hidden {
            order.retain(|&i| i == front);
        }
        let scene = Scene::compose(
            background.clone(),
            cfg.height,
            cfg.width,
            order.iter().map(|&i| (poses[i].clone(), &looks[i])).collect(),
        );
        let kps: Vec<Option<Vec<Keypoint>>> = (0..2)
            .map(|i| order.iter().position(|&o| o == i).map(|s| scene.keypoints_of(s)))
            .collect();
        let mut dets = Vec::new();
        let mut gt = Vec::new();
        for i in 0..2 {
            let Some(k) = &kps[i] else { continue };
            let visible = k.iter().filter(|p| p.visible).count();
            if visible < cfg.min_visible_joints {
                continue;
            }
            let bbox = person_box(&poses[i], cfg.box_aspect, cfg.height, cfg.width);
            let crossing: Vec<Vec<Keypoint>> = kps
                .iter()
                .enumerate()
                .filter(|&(j, o)| j != i && o.is_some())
                .map(|(_, o)| o.clone().unwrap_or_default())
                .filter(|o| o.iter().any(|p| p.visible && bbox.contains(p.x, p.y)))
                .map(|o| o.into_iter().map(|p| Keypoint { visible: p.visible && bbox.contains(p.x, p.y), ..p }).collect())
                .collect();
            dets.push(Detection {
                frame: t,
                bbox,
                confidence: 0.2 + 0.8 * visible as f32 / k.len() as f32,
                keypoints: k.clone(),
                crossing_skeletons: crossing,
            });
            gt.push(LabeledBox { id: ids[i], bbox });
        }
        frames.push(scene.to_image(&mut rng, 0.02));
        detections.push(dets);
        ground_truth.push(gt);
    }
    Ok(CrossingSequence { frames, detections, ground_truth })
}
