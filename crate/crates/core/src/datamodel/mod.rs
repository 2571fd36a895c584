//! Samples, keypoints and datasets.
//!
//! A [`Sample`] is one person crop: an RGB raster, the identity label, the
//! keypoint prompt split by polarity, and a coarse human-parsing map whose
//! nonzero values mark the target's body parts. Datasets are produced by the
//! procedural generator in [`synth`] and persisted with [`io`].

pub mod io;
pub mod render;
pub mod sequence;
pub mod synth;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset};
pub use synth::{generate_synthetic_dataset, SynthConfig};

/// Number of COCO body joints.
pub const NUM_JOINTS: usize = 17;

pub const COCO_JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// A semantic 2D keypoint in pixel coordinates.
///
/// Serialized as the compact array `[x, y, joint_id, visible, confidence]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "KeypointRecord", into = "KeypointRecord")]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub joint_id: u8,
    pub visible: bool,
    pub confidence: f32,
}

#[derive(Serialize, Deserialize)]
struct KeypointRecord(f32, f32, u8, bool, f32);

impl From<KeypointRecord> for Keypoint {
    fn from(r: KeypointRecord) -> Self {
        Keypoint {
            x: r.0,
            y: r.1,
            joint_id: r.2,
            visible: r.3,
            confidence: r.4,
        }
    }
}

impl From<Keypoint> for KeypointRecord {
    fn from(k: Keypoint) -> Self {
        KeypointRecord(k.x, k.y, k.joint_id, k.visible, k.confidence)
    }
}

impl Keypoint {
    pub fn new(x: f32, y: f32, joint_id: u8) -> Self {
        Keypoint {
            x,
            y,
            joint_id,
            visible: true,
            confidence: 1.0,
        }
    }

    pub fn hidden(x: f32, y: f32, joint_id: u8) -> Self {
        Keypoint {
            x,
            y,
            joint_id,
            visible: false,
            confidence: 0.0,
        }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f32 && self.y < height as f32
    }

    /// Pixel containing the keypoint, if it lies inside the raster.
    pub fn pixel(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        self.in_bounds(height, width)
            .then(|| (self.x.floor() as usize, self.y.floor() as usize))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.joint_id as usize >= NUM_JOINTS {
            return Err(Error::Keypoint(format!(
                "joint_id {} outside [0, {NUM_JOINTS})",
                self.joint_id
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Keypoint(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if self.visible && !self.in_bounds(height, width) {
            return Err(Error::Keypoint(format!(
                "visible keypoint ({}, {}) outside {width}x{height} image",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Keypoint prompt: the target skeleton as positives, every other person's
/// keypoints flattened into negatives. Empty positives is the prompt-free mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub positives: Vec<Keypoint>,
    pub negatives: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(positives: Vec<Keypoint>, negatives: Vec<Keypoint>) -> Self {
        KeypointSet {
            positives,
            negatives,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn visible_positives(&self) -> usize {
        self.positives.iter().filter(|k| k.visible).count()
    }

    pub fn visible_negatives(&self) -> usize {
        self.negatives.iter().filter(|k| k.visible).count()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .try_for_each(|k| k.validate(height, width))
    }

    /// Drops the visibility flag of every keypoint falling outside the raster.
    pub fn clip_to(&mut self, height: usize, width: usize) {
        for k in self.positives.iter_mut().chain(self.negatives.iter_mut()) {
            if k.visible && !k.in_bounds(height, width) {
                k.visible = false;
            }
        }
    }
}

/// One person crop with its identity, prompt and parsing labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub identity: u32,
    pub keypoints: KeypointSet,
    /// Per-pixel part label, 0 = background, `i` = body part `i`.
    pub parsing: GrayImage,
    pub source_id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    /// `(N, P)`: visible negative and positive keypoint counts.
    pub fn occlusion_counts(&self) -> (f64, f64) {
        (
            self.keypoints.visible_negatives() as f64,
            self.keypoints.visible_positives() as f64,
        )
    }

    pub fn validate(&self, num_parts: usize) -> Result<()> {
        if self.parsing.dimensions() != self.image.dimensions() {
            return Err(Error::Shape(format!(
                "sample {}: parsing {:?} vs image {:?}",
                self.id,
                self.parsing.dimensions(),
                self.image.dimensions()
            )));
        }
        if let Some(bad) = self.parsing.pixels().find(|p| p.0[0] as usize > num_parts) {
            return Err(Error::Invalid(format!(
                "sample {}: parsing label {} exceeds K={num_parts}",
                self.id, bad.0[0]
            )));
        }
        self.keypoints.validate(self.height(), self.width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Query,
    Gallery,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Query, SplitName::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Query => "query",
            SplitName::Gallery => "gallery",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "query" => Ok(SplitName::Query),
            "gallery" => Ok(SplitName::Gallery),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub num_parts: usize,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Query => &self.query,
            SplitName::Gallery => &self.gallery,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (SplitName, &Sample)> {
        SplitName::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |x| (s, x)))
    }

    pub fn identities(&self, name: SplitName) -> std::collections::BTreeSet<u32> {
        self.split(name).iter().map(|s| s.identity).collect()
    }

    /// Train identities must be disjoint from test identities and every
    /// query identity must occur in the gallery.
    pub fn check_hygiene(&self) -> Result<()> {
        let train = self.identities(SplitName::Train);
        let query = self.identities(SplitName::Query);
        let gallery = self.identities(SplitName::Gallery);
        if let Some(id) = train.iter().find(|id| query.contains(id) || gallery.contains(id)) {
            return Err(Error::Invalid(format!(
                "identity {id} appears in both train and test splits"
            )));
        }
        if let Some(id) = query.iter().find(|id| !gallery.contains(id)) {
            return Err(Error::Invalid(format!(
                "query identity {id} has no gallery sample"
            )));
        }
        Ok(())
    }
}
