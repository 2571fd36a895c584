//! Synthetic multi-person-occlusion dataset.
//!
//! Every identity is a procedurally dressed figure; each image re-poses it
//! inside a crop and, with the configured probability, composites a second
//! identity in front of or behind it. The split mirrors the occluded-ReID
//! protocol: disjoint train/test identities, and the most occluded 20% of
//! each test identity's images become queries.

use image::{GrayImage, Luma, Rgb as RgbPixel, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{rasterize, Appearance, FigureRaster, Pose, Rgb};
use super::{DatasetSplit, Keypoint, KeypointSet, Sample};
use crate::error::{Error, Result};
use crate::geometry::{mpol, PartGrouping};

pub const MIN_IMAGES_PER_IDENTITY: usize = 4;
pub const MAX_IMAGES_PER_IDENTITY: usize = 20;
pub const QUERY_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Probability that a distractor person is composited into a test image.
    pub occlusion_p: f32,
    /// Distractor probability for training images; defaults to `occlusion_p`.
    pub train_occlusion_p: Option<f32>,
    /// Fraction of identities assigned to the training split.
    pub train_fraction: f32,
    pub num_parts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 16,
            images_per_identity: 8,
            height: 64,
            width: 32,
            occlusion_p: 0.5,
            train_occlusion_p: None,
            train_fraction: 0.5,
            num_parts: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be nonzero multiples of 4",
                self.height, self.width
            )));
        }
        if self.identities < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        for p in [Some(self.occlusion_p), self.train_occlusion_p].into_iter().flatten() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("occlusion probability {p} outside [0, 1]")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        PartGrouping::for_parts(self.num_parts)?;
        Ok(())
    }

    pub fn clamped_images_per_identity(&self) -> usize {
        self.images_per_identity
            .clamp(MIN_IMAGES_PER_IDENTITY, MAX_IMAGES_PER_IDENTITY)
    }

    pub fn train_identities(&self) -> usize {
        let n = (self.identities as f32 * self.train_fraction).round() as usize;
        n.clamp(1, self.identities - 1)
    }
}

/// Stable 64-bit mix of a seed and a stream of tags.
pub(crate) fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        z = z.wrapping_add(t).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub(crate) fn identity_appearance(seed: u64, identity: u32) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, identity as u64]));
    Appearance::random(&mut rng)
}

/// A figure placed in a scene, back-to-front order given by its index.
pub(crate) struct PlacedFigure {
    pub pose: Pose,
    pub raster: FigureRaster,
}

/// Composited scene: colours, the frontmost figure owning each pixel, and the
/// individual figure rasters.
pub(crate) struct Scene {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Rgb>,
    pub owner: Vec<Option<usize>>,
    pub figures: Vec<PlacedFigure>,
}

pub(crate) fn random_background<R: Rng>(rng: &mut R, height: usize, width: usize) -> Vec<Rgb> {
    let base: Rgb = [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ];
    let grey = base.iter().sum::<f32>() / 3.0;
    let base = base.map(|v| 0.5 * v + 0.5 * grey);
    let tilt: Rgb = [
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    ];
    let mut px: Vec<Rgb> = (0..height * width)
        .map(|i| {
            let t = (i / width) as f32 / height as f32 - 0.5;
            [0, 1, 2].map(|c| (base[c] + tilt[c] * t).clamp(0.0, 1.0))
        })
        .collect();
    for _ in 0..rng.random_range(1..4) {
        let c: Rgb = [
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        ];
        let g = c.iter().sum::<f32>() / 3.0;
        let c = c.map(|v| 0.6 * v + 0.4 * g);
        let w = rng.random_range(width / 8..=width / 2).max(1);
        let h = rng.random_range(height / 8..=height / 2).max(1);
        let x0 = rng.random_range(0..width);
        let y0 = rng.random_range(0..height);
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                px[y * width + x] = c;
            }
        }
    }
    px
}

impl Scene {
    pub fn compose(background: Vec<Rgb>, height: usize, width: usize, figures: Vec<(Pose, &Appearance)>) -> Self {
        let mut pixels = background;
        let mut owner = vec![None; height * width];
        let mut placed = Vec::with_capacity(figures.len());
        for (idx, (pose, look)) in figures.into_iter().enumerate() {
            let raster = rasterize(&pose, look, height, width);
            for (i, &r) in raster.region.iter().enumerate() {
                if r != 0 {
                    pixels[i] = raster.color[i];
                    owner[i] = Some(idx);
                }
            }
            placed.push(PlacedFigure { pose, raster });
        }
        Scene {
            height,
            width,
            pixels,
            owner,
            figures: placed,
        }
    }

    /// A joint of figure `idx` is visible when it lies in frame, its pixel is
    /// not owned by another figure, and the figure owns a pixel within 2 px.
    pub fn keypoints_of(&self, idx: usize) -> Vec<Keypoint> {
        self.figures[idx]
            .pose
            .keypoints()
            .into_iter()
            .map(|mut k| {
                k.visible = match k.pixel(self.height, self.width) {
                    Some((x, y)) => {
                        let own = self.owner[y * self.width + x];
                        own.map_or(true, |o| o == idx) && self.owns_near(idx, x, y, 2)
                    }
                    None => false,
                };
                if !k.visible {
                    k.confidence = 0.0;
                }
                k
            })
            .collect()
    }

    fn owns_near(&self, idx: usize, x: usize, y: usize, r: usize) -> bool {
        let ys = y.saturating_sub(r)..(y + r + 1).min(self.height);
        ys.into_iter().any(|yy| {
            (x.saturating_sub(r)..(x + r + 1).min(self.width))
                .any(|xx| self.owner[yy * self.width + xx] == Some(idx))
        })
    }

    /// Parsing map of figure `idx`: its own visible pixels, labelled by part.
    pub fn parsing_of(&self, idx: usize, grouping: &PartGrouping) -> GrayImage {
        let raster = &self.figures[idx].raster;
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            if self.owner[i] == Some(idx) {
                Luma([grouping.region_label(raster.region[i])])
            } else {
                Luma([0])
            }
        })
    }

    pub fn to_image<R: Rng>(&self, rng: &mut R, noise: f32) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.pixels[y as usize * self.width + x as usize];
            RgbPixel(c.map(|v| {
                let v = (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            }))
        })
    }
}

const PIXEL_NOISE: f32 = 0.02;

struct Rendered {
    sample: Sample,
}

fn render_sample(
    cfg: &SynthConfig,
    grouping: &PartGrouping,
    identity: u32,
    index: usize,
    distractor: Option<u32>,
) -> Rendered {
    let (h, w) = (cfg.height as f32, cfg.width as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, identity as u64, index as u64]));
    let look = identity_appearance(cfg.seed, identity);
    let body_h = h * rng.random_range(0.82..0.92);
    let base_y = h * (1.0 - rng.random_range(0.01..0.05));
    let cx = w * (0.5 + rng.random_range(-0.1..0.1));
    let target_pose = Pose::sample(&mut rng, cx, base_y, body_h);
    let background = random_background(&mut rng, cfg.height, cfg.width);

    let (scene, target_idx) = match distractor {
        None => (
            Scene::compose(background, cfg.height, cfg.width, vec![(target_pose, &look)]),
            0,
        ),
        Some(other) => {
            let other_look = identity_appearance(cfg.seed, other);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let ocx = cx + side * w * rng.random_range(0.15..0.45);
            let obase = base_y + h * rng.random_range(-0.04..0.04);
            let oh = body_h * rng.random_range(0.9..1.1);
            let other_pose = Pose::sample(&mut rng, ocx, obase, oh);
            if rng.random_bool(0.5) {
                // Distractor in front.
                let figs = vec![(target_pose, &look), (other_pose, &other_look)];
                (Scene::compose(background, cfg.height, cfg.width, figs), 0)
            } else {
                let figs = vec![(other_pose, &other_look), (target_pose, &look)];
                (Scene::compose(background, cfg.height, cfg.width, figs), 1)
            }
        }
    };
    let positives = scene.keypoints_of(target_idx);
    let negatives = (0..scene.figures.len())
        .filter(|&i| i != target_idx)
        .flat_map(|i| scene.keypoints_of(i))
        .collect();
    let parsing = scene.parsing_of(target_idx, grouping);
    let image = scene.to_image(&mut rng, PIXEL_NOISE);
    Rendered {
        sample: Sample {
            id: format!("{identity:04}_{index:02}"),
            image,
            identity,
            keypoints: KeypointSet::new(positives, negatives),
            parsing,
            source_id: format!("synth{}-scene{:03}", cfg.seed, identity as usize * 2 + index % 2),
        },
    }
}

fn render_identity_images(
    cfg: &SynthConfig,
    grouping: &PartGrouping,
    identity: u32,
    pool: &[u32],
    occlusion_p: f32,
) -> Vec<Sample> {
    let n = cfg.clamped_images_per_identity();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, identity as u64]));
    let others: Vec<u32> = pool.iter().copied().filter(|&i| i != identity).collect();
    (0..n)
        .map(|index| {
            let occluded = !others.is_empty() && rng.random_bool(occlusion_p as f64);
            let distractor = occluded.then(|| others[rng.random_range(0..others.len())]);
            render_sample(cfg, grouping, identity, index, distractor).sample
        })
        .collect()
}

/// Number of query images for an identity with `n` test images.
pub fn query_count(n: usize) -> usize {
    ((n as f64 * QUERY_FRACTION).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    if cfg.images_per_identity != cfg.clamped_images_per_identity() {
        log::warn!(
            "images_per_identity {} clamped to {}",
            cfg.images_per_identity,
            cfg.clamped_images_per_identity()
        );
    }
    let grouping = PartGrouping::for_parts(cfg.num_parts)?;
    let n_train = cfg.train_identities();
    let train_ids: Vec<u32> = (0..n_train as u32).collect();
    let test_ids: Vec<u32> = (n_train as u32..cfg.identities as u32).collect();
    let train_p = cfg.train_occlusion_p.unwrap_or(cfg.occlusion_p);

    let train = train_ids
        .iter()
        .flat_map(|&id| render_identity_images(cfg, &grouping, id, &train_ids, train_p))
        .collect();

    let per_identity: Vec<Vec<Sample>> = test_ids
        .iter()
        .map(|&id| render_identity_images(cfg, &grouping, id, &test_ids, cfg.occlusion_p))
        .collect();
    let stats: Vec<(f64, f64)> = per_identity
        .iter()
        .flatten()
        .map(Sample::occlusion_counts)
        .collect();
    let scores = mpol(&stats)?;
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut offset = 0;
    for samples in per_identity {
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[offset + b].total_cmp(&scores[offset + a]).then(a.cmp(&b)));
        let k = query_count(n);
        let mut is_query = vec![false; n];
        for &i in &order[..k] {
            is_query[i] = true;
        }
        for (sample, q) in samples.into_iter().zip(is_query) {
            if q {
                query.push(sample);
            } else {
                gallery.push(sample);
            }
        }
        offset += n;
    }
    let split = DatasetSplit {
        num_parts: cfg.num_parts,
        train,
        query,
        gallery,
    };
    split.check_hygiene()?;
    Ok(split)
}
