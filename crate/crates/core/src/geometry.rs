//! Prompt geometry: keypoint-to-part grouping, Gaussian prompt heatmaps,
//! target-skeleton selection and the multi-person occlusion level score.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::datamodel::{Keypoint, KeypointSet, COCO_JOINT_NAMES, NUM_JOINTS};
use crate::error::{Error, Result};

/// Default kernel width as a fraction of the image width.
pub const DEFAULT_ALPHA_G: f32 = 0.1;

/// Gaussian kernels are zeroed beyond this many standard deviations.
pub const KERNEL_CUTOFF_SIGMAS: f32 = 3.0;

/// Number of fine body regions drawn by the figure renderer
/// (head, torso, right/left arm, right/left leg, right/left foot).
pub const NUM_REGIONS: usize = 8;

const GROUPING_K8: &str = include_str!("../data/grouping_k8.json");
const GROUPING_K5: &str = include_str!("../data/grouping_k5.json");

#[derive(Deserialize)]
struct GroupingFile {
    num_parts: usize,
    part_names: Vec<String>,
    joint_to_part: BTreeMap<String, usize>,
    region_to_part: Vec<usize>,
}

/// Maps each COCO joint to one of `K` body parts (1-based; 0 is reserved for
/// the negative-prompt channel and the parsing background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartGrouping {
    table: [u8; NUM_JOINTS],
    region_to_part: [u8; NUM_REGIONS],
    part_names: Vec<String>,
    num_parts: usize,
}

impl PartGrouping {
    /// `{head, torso, right/left arm, right/left leg, right/left foot}`.
    pub fn coco_k8() -> Self {
        Self::from_json(GROUPING_K8).expect("bundled K=8 grouping is valid")
    }

    /// `{head, torso, arms, legs, feet}`.
    pub fn coco_k5() -> Self {
        Self::from_json(GROUPING_K5).expect("bundled K=5 grouping is valid")
    }

    pub fn for_parts(num_parts: usize) -> Result<Self> {
        match num_parts {
            8 => Ok(Self::coco_k8()),
            5 => Ok(Self::coco_k5()),
            k => Err(Error::Config(format!(
                "no bundled grouping for K={k} (supported: 5, 8)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GroupingFile = serde_json::from_str(text)?;
        let k = file.num_parts;
        if k == 0 || k > u8::MAX as usize {
            return Err(Error::Config(format!("invalid part count {k}")));
        }
        if file.part_names.len() != k {
            return Err(Error::Config(format!(
                "{} part names for K={k}",
                file.part_names.len()
            )));
        }
        let mut table = [0u8; NUM_JOINTS];
        for (joint, name) in COCO_JOINT_NAMES.iter().enumerate() {
            let part = *file
                .joint_to_part
                .get(*name)
                .ok_or_else(|| Error::Config(format!("joint '{name}' has no part")))?;
            if !(1..=k).contains(&part) {
                return Err(Error::Config(format!(
                    "joint '{name}' maps to part {part} outside [1, {k}]"
                )));
            }
            table[joint] = part as u8;
        }
        if let Some(unknown) = file
            .joint_to_part
            .keys()
            .find(|n| !COCO_JOINT_NAMES.contains(&n.as_str()))
        {
            return Err(Error::Config(format!("unknown joint '{unknown}'")));
        }
        for part in 1..=k {
            if !table.iter().any(|&p| p as usize == part) {
                return Err(Error::Config(format!("part {part} has no joint")));
            }
        }
        if file.region_to_part.len() != NUM_REGIONS
            || file.region_to_part.iter().any(|&p| !(1..=k).contains(&p))
        {
            return Err(Error::Config("region_to_part must list 8 parts in [1, K]".into()));
        }
        let mut region_to_part = [0u8; NUM_REGIONS];
        for (dst, &src) in region_to_part.iter_mut().zip(&file.region_to_part) {
            *dst = src as u8;
        }
        Ok(PartGrouping {
            table,
            region_to_part,
            part_names: file.part_names,
            num_parts: k,
        })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn part_names(&self) -> &[String] {
        &self.part_names
    }

    /// Part index in `[1, K]` of a COCO joint.
    pub fn part_of(&self, joint_id: u8) -> Result<usize> {
        self.table
            .get(joint_id as usize)
            .map(|&p| p as usize)
            .ok_or_else(|| Error::Keypoint(format!("joint_id {joint_id} outside [0, 17)")))
    }

    /// Parsing label for a fine renderer region (1-based, 0 stays background).
    pub fn region_label(&self, region: u8) -> u8 {
        match region {
            0 => 0,
            r => self.region_to_part[(r - 1) as usize],
        }
    }
}

/// Stacked prompt heatmaps, channel-first `(K+1, H, W)`. Channel 0 holds the
/// negatives, channels `1..=K` the positive part groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptHeatmaps {
    pub maps: Array3<f32>,
}

impl PromptHeatmaps {
    pub fn zeros(num_parts: usize, height: usize, width: usize) -> Self {
        PromptHeatmaps {
            maps: Array3::zeros((num_parts + 1, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.maps.dim().0
    }

    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.maps[[channel, y, x]]
    }

    /// Channel-last flat copy, `H * W * (K+1)` values.
    pub fn to_hwc(&self) -> Vec<f32> {
        let (c, h, w) = self.maps.dim();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                out.extend((0..c).map(|ch| self.maps[[ch, y, x]]));
            }
        }
        out
    }
}

/// Unit-peak isotropic Gaussian centred on `(cx, cy)` evaluated at `(x, y)`.
pub fn gaussian_kernel(cx: f32, cy: f32, x: f32, y: f32, sigma: f32) -> f32 {
    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
    (-(d2 as f64) / (2.0 * (sigma as f64).powi(2))).exp() as f32
}

/// Draws one Gaussian per visible keypoint into its channel, combining
/// overlapping kernels by pixelwise maximum. Kernel std is `alpha_g * width`.
pub fn render_heatmaps(
    keypoints: &KeypointSet,
    grouping: &PartGrouping,
    height: usize,
    width: usize,
    alpha_g: f32,
) -> Result<PromptHeatmaps> {
    if !(alpha_g > 0.0) {
        return Err(Error::Invalid(format!("alpha_G must be > 0, got {alpha_g}")));
    }
    let sigma = alpha_g * width as f32;
    let mut heatmaps = PromptHeatmaps::zeros(grouping.num_parts(), height, width);
    let negatives = keypoints.negatives.iter().map(|k| (0usize, k));
    let positives = keypoints
        .positives
        .iter()
        .map(|k| grouping.part_of(k.joint_id).map(|p| (p, k)));
    for entry in negatives.map(Ok).chain(positives) {
        let (channel, kp) = entry?;
        if !kp.visible {
            continue;
        }
        kp.validate(height, width)?;
        draw_kernel(&mut heatmaps.maps, channel, kp, sigma);
    }
    Ok(heatmaps)
}

fn draw_kernel(maps: &mut Array3<f32>, channel: usize, kp: &Keypoint, sigma: f32) {
    let (_, h, w) = maps.dim();
    let radius = KERNEL_CUTOFF_SIGMAS * sigma;
    let x0 = (kp.x - radius).floor().max(0.0) as usize;
    let y0 = (kp.y - radius).floor().max(0.0) as usize;
    let x1 = ((kp.x + radius).ceil() as usize).min(w - 1);
    let y1 = ((kp.y + radius).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (fx, fy) = (x as f32, y as f32);
            if (fx - kp.x).powi(2) + (fy - kp.y).powi(2) > radius * radius {
                continue;
            }
            let v = gaussian_kernel(kp.x, kp.y, fx, fy, sigma);
            let cell = &mut maps[[channel, y, x]];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

/// Picks the intended target among several skeletons: the one whose head lies
/// closest to the top-centre point `(W/2, 0)`. The head anchor is the mean of
/// the visible face joints; skeletons without one fall back to their topmost
/// visible keypoint. Ties go to the lower index.
pub fn select_target_skeleton(
    skeletons: &[Vec<Keypoint>],
    _height: usize,
    width: usize,
) -> Result<(usize, KeypointSet)> {
    if skeletons.is_empty() {
        return Err(Error::Invalid("no skeleton to select from".into()));
    }
    let anchor = |skeleton: &[Keypoint]| -> Option<(f32, f32)> {
        let face: Vec<_> = skeleton
            .iter()
            .filter(|k| k.visible && k.joint_id <= 4)
            .collect();
        if !face.is_empty() {
            let n = face.len() as f32;
            let x = face.iter().map(|k| k.x).sum::<f32>() / n;
            let y = face.iter().map(|k| k.y).sum::<f32>() / n;
            return Some((x, y));
        }
        skeleton
            .iter()
            .filter(|k| k.visible)
            .min_by(|a, b| a.y.total_cmp(&b.y))
            .map(|k| (k.x, k.y))
    };
    let top_center = (width as f32 / 2.0, 0.0f32);
    let mut best: Option<(usize, f32)> = None;
    for (i, skeleton) in skeletons.iter().enumerate() {
        let (x, y) = anchor(skeleton).ok_or_else(|| {
            Error::Invalid(format!("skeleton {i} has no visible keypoint"))
        })?;
        let d = (x - top_center.0).hypot(y - top_center.1);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (target, _) = best.expect("nonempty");
    let negatives = skeletons
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .flat_map(|(_, s)| s.iter().copied())
        .collect();
    Ok((
        target,
        KeypointSet::new(skeletons[target].clone(), negatives),
    ))
}

/// Multi-person occlusion level of each sample from its `(N, P)` counts of
/// negative and positive keypoints: `N - P` min-max normalised over the set.
/// A degenerate set where every `N - P` is equal maps to all zeros.
pub fn mpol(stats: &[(f64, f64)]) -> Result<Vec<f64>> {
    if stats.is_empty() {
        return Err(Error::Invalid("MPOL needs at least one sample".into()));
    }
    let excess: Vec<f64> = stats.iter().map(|(n, p)| n - p).collect();
    let lo = excess.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![0.0; stats.len()]);
    }
    Ok(excess.iter().map(|e| (e - lo) / span).collect())
}

/// Removes `ceil(fraction * |positives|)` positive keypoints chosen uniformly
/// with a seeded generator. Negatives are untouched.
pub fn prompt_dropout(keypoints: &KeypointSet, fraction: f32, seed: u64) -> KeypointSet {
    let fraction = fraction.clamp(0.0, 1.0);
    let n = keypoints.positives.len();
    let remove = ((fraction as f64) * n as f64).ceil() as usize;
    let remove = remove.min(n);
    if remove == 0 {
        return keypoints.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; n];
    for i in sample_indices(&mut rng, n, remove) {
        dropped[i] = true;
    }
    let positives = keypoints
        .positives
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(k, _)| *k)
        .collect();
    KeypointSet::new(positives, keypoints.negatives.clone())
}
