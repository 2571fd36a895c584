//! Appearance-only online pose tracking: each detection is embedded with its
//! own keypoints as positive prompts and crossing skeletons as negatives, then
//! matched to tracklets by part distance with a two-stage Hungarian step.

pub mod hungarian;
pub mod io;
pub mod metrics;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Keypoint, KeypointSet, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::losses::{part_distance, NO_OVERLAP_DISTANCE};
use crate::model::head::PartDescriptor;
use crate::model::KprModel;

pub use metrics::{tracking_metrics, LabeledBox, TrackingMetrics};

/// Smallest accepted bbox side, in pixels.
pub const MIN_BOX_SIDE: f32 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    #[serde(rename = "conf")]
    pub confidence: f32,
    pub keypoints: Vec<Keypoint>,
    /// Keypoints of other people inside the bbox.
    #[serde(default)]
    pub crossing_skeletons: Vec<Vec<Keypoint>>,
}

impl Detection {
    pub fn validate(&self, frame_h: usize, frame_w: usize) -> Result<()> {
        let b = &self.bbox;
        if b.w < MIN_BOX_SIDE || b.h < MIN_BOX_SIDE {
            return Err(Error::Invalid(format!("degenerate bbox {}x{} in frame {}", b.w, b.h, self.frame)));
        }
        if b.x < 0.0 || b.y < 0.0 || b.x + b.w > frame_w as f32 + 1e-3 || b.y + b.h > frame_h as f32 + 1e-3 {
            return Err(Error::Invalid(format!("bbox {b:?} outside {frame_w}x{frame_h} frame {}", self.frame)));
        }
        if self.keypoints.len() != NUM_JOINTS {
            return Err(Error::Keypoint(format!("detection has {} keypoints, expected {NUM_JOINTS}", self.keypoints.len())));
        }
        Ok(())
    }

    /// Keypoints in crop coordinates for a crop resized to `height x width`:
    /// own keypoints as positives, crossing skeletons as negatives. Points
    /// falling outside the crop are marked invisible.
    pub fn crop_prompt(&self, height: usize, width: usize) -> KeypointSet {
        let (sx, sy) = (width as f32 / self.bbox.w, height as f32 / self.bbox.h);
        let map = |k: &Keypoint| Keypoint { x: (k.x - self.bbox.x) * sx, y: (k.y - self.bbox.y) * sy, ..*k };
        let positives = self.keypoints.iter().map(map).collect();
        let negatives = self.crossing_skeletons.iter().flatten().filter(|k| k.visible).map(map).collect();
        let mut set = KeypointSet::new(positives, negatives);
        set.clip_to(height, width);
        set
    }
}

/// Crops the detection box and resizes it to the model input size.
pub fn crop_detection(frame: &RgbImage, det: &Detection, height: usize, width: usize) -> Result<RgbImage> {
    det.validate(frame.height() as usize, frame.width() as usize)?;
    let b = &det.bbox;
    let x0 = b.x.floor().max(0.0) as u32;
    let y0 = b.y.floor().max(0.0) as u32;
    let x1 = ((b.x + b.w).ceil() as u32).min(frame.width()).max(x0 + 1);
    let y1 = ((b.y + b.h).ceil() as u32).min(frame.height()).max(y0 + 1);
    let crop = imageops::crop_imm(frame, x0, y0, x1 - x0, y1 - y0).to_image();
    Ok(imageops::resize(&crop, width as u32, height as u32, FilterType::Triangle))
}

/// Embeds every detection of one frame. With `prompts` off the model sees the
/// crop alone.
pub fn embed_detections(
    model: &KprModel,
    frame: &RgbImage,
    detections: &[Detection],
    prompts: bool,
) -> Result<Vec<PartDescriptor>> {
    let (h, w) = (model.config().height, model.config().width);
    let crops = detections
        .iter()
        .map(|d| crop_detection(frame, d, h, w))
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<KeypointSet> = detections.iter().map(|d| d.crop_prompt(h, w)).collect();
    let items: Vec<_> = crops
        .iter()
        .zip(&sets)
        .map(|(c, s)| (c, prompts.then_some(s)))
        .collect();
    model.describe(&items, 32, false)
}

pub fn embed_detection(model: &KprModel, frame: &RgbImage, det: &Detection, prompts: bool) -> Result<PartDescriptor> {
    Ok(embed_detections(model, frame, std::slice::from_ref(det), prompts)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Tentative,
    Active,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub track_id: u32,
    pub part_feats: Vec<Vec<f32>>,
    pub part_counts: Vec<u32>,
    pub state: TrackState,
    pub misses: usize,
    pub hits: usize,
    pub last_frame: usize,
}

impl Tracklet {
    pub fn new(track_id: u32, frame: usize, d: &PartDescriptor) -> Self {
        let mut t = Tracklet {
            track_id,
            part_feats: d.f.iter().map(|f| vec![0.0; f.len()]).collect(),
            part_counts: vec![0; d.num_parts()],
            state: TrackState::Tentative,
            misses: 0,
            hits: 0,
            last_frame: frame,
        };
        update_tracklet(&mut t, d, frame);
        t.state = TrackState::Tentative;
        t
    }

    /// Current features; parts never observed are invisible.
    pub fn descriptor(&self) -> PartDescriptor {
        PartDescriptor {
            f: self.part_feats.clone(),
            v: self.part_counts.iter().map(|&c| c > 0).collect(),
            attention: None,
        }
    }
}

/// Running mean per visible part; invisible parts keep their features.
pub fn update_tracklet(t: &mut Tracklet, d: &PartDescriptor, frame: usize) {
    for i in 0..d.num_parts() {
        if !d.v[i] {
            continue;
        }
        let n = t.part_counts[i] as f32;
        for (s, &x) in t.part_feats[i].iter_mut().zip(&d.f[i]) {
            *s = (n * *s + x) / (n + 1.0);
        }
        t.part_counts[i] += 1;
    }
    t.misses = 0;
    t.hits += 1;
    t.last_frame = frame;
    t.state = TrackState::Active;
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// `(tracklet index, detection index, cost)`.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_dets: Vec<usize>,
}

/// Minimum-cost assignment on a `tracks x dets` cost matrix; matched pairs
/// costing more than `threshold` are dropped afterwards.
pub fn associate_costs(cost: &[Vec<f64>], n_tracks: usize, n_dets: usize, threshold: f64) -> Result<Association> {
    let mut out = Association::default();
    let pairs = if n_tracks == 0 || n_dets == 0 { Vec::new() } else { hungarian::assign(cost)? };
    let mut track_used = vec![false; n_tracks];
    let mut det_used = vec![false; n_dets];
    for (t, d) in pairs {
        if cost[t][d] <= threshold {
            out.matches.push((t, d, cost[t][d]));
            track_used[t] = true;
            det_used[d] = true;
        }
    }
    out.unmatched_tracks = (0..n_tracks).filter(|&t| !track_used[t]).collect();
    out.unmatched_dets = (0..n_dets).filter(|&d| !det_used[d]).collect();
    Ok(out)
}

pub fn associate(tracklets: &[&Tracklet], descriptors: &[&PartDescriptor], threshold: f64) -> Result<Association> {
    let cost = tracklets
        .iter()
        .map(|t| {
            let td = t.descriptor();
            descriptors
                .iter()
                .map(|d| Ok(part_distance(&td, d, NO_OVERLAP_DISTANCE)?.value))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    associate_costs(&cost, tracklets.len(), descriptors.len(), threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub match_threshold: f64,
    pub high_confidence: f32,
    pub low_confidence: f32,
    pub min_hits: usize,
    pub miss_budget: usize,
    pub max_age: usize,
    pub prompts: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            match_threshold: 0.2,
            high_confidence: 0.6,
            low_confidence: 0.1,
            min_hits: 2,
            miss_budget: 1,
            max_age: 30,
            prompts: true,
        }
    }
}

/// A confirmed track reported for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: usize,
    pub track_id: u32,
    pub bbox: BBox,
    pub confidence: f32,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub config: TrackerConfig,
    pub tracklets: Vec<Tracklet>,
    next_id: u32,
    last_frame: Option<usize>,
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Self {
        TrackerState { config, tracklets: Vec::new(), next_id: 1, last_frame: None }
    }

    /// Advances by one frame given its detections and their descriptors.
    /// Returns the confirmed tracks matched in this frame.
    pub fn step(&mut self, frame: usize, detections: &[Detection], descriptors: &[PartDescriptor]) -> Result<Vec<TrackOutput>> {
        if detections.len() != descriptors.len() {
            return Err(Error::Invalid("one descriptor per detection required".into()));
        }
        if let Some(prev) = self.last_frame {
            if frame <= prev {
                return Err(Error::Invalid(format!("frame {frame} after frame {prev}")));
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(Error::Invalid(format!("detection of frame {} passed for frame {frame}", d.frame)));
        }
        let first_frame = self.last_frame.is_none();
        self.last_frame = Some(frame);
        let cfg = self.config.clone();

        let high: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].confidence >= cfg.high_confidence).collect();
        let low: Vec<usize> = (0..detections.len())
            .filter(|&i| (cfg.low_confidence..cfg.high_confidence).contains(&detections[i].confidence))
            .collect();
        let confirmed: Vec<usize> = (0..self.tracklets.len())
            .filter(|&t| self.tracklets[t].state != TrackState::Tentative)
            .collect();
        let tentative: Vec<usize> = (0..self.tracklets.len())
            .filter(|&t| self.tracklets[t].state == TrackState::Tentative)
            .collect();

        let mut matched: Vec<(usize, usize)> = Vec::new();
        // Stage 1: confirmed tracks vs high-confidence detections.
        let (left_tracks, left_high) = self.match_subset(&confirmed, &high, descriptors, &mut matched)?;
        // Stage 2: remaining confirmed tracks vs low-confidence detections.
        let (left_tracks, _) = self.match_subset(&left_tracks, &low, descriptors, &mut matched)?;
        // Stage 3: tentative tracks vs the remaining high-confidence detections.
        let (left_tentative, new_dets) = self.match_subset(&tentative, &left_high, descriptors, &mut matched)?;

        let mut out = Vec::new();
        for &(t, d) in &matched {
            let tr = &mut self.tracklets[t];
            let was_tentative = tr.state == TrackState::Tentative;
            update_tracklet(tr, &descriptors[d], frame);
            if was_tentative && tr.hits < cfg.min_hits {
                tr.state = TrackState::Tentative;
            }
            if tr.state == TrackState::Active {
                out.push(output(tr.track_id, &detections[d]));
            }
        }
        for &t in &left_tracks {
            let tr = &mut self.tracklets[t];
            tr.misses += 1;
            if tr.misses >= cfg.miss_budget {
                tr.state = TrackState::Lost;
            }
        }
        let mut dead = vec![false; self.tracklets.len()];
        for &t in &left_tentative {
            dead[t] = true;
        }
        for (t, tr) in self.tracklets.iter().enumerate() {
            if tr.state == TrackState::Lost && frame - tr.last_frame > cfg.max_age {
                dead[t] = true;
            }
        }
        let mut keep = dead.iter().map(|d| !d);
        self.tracklets.retain(|_| keep.next().unwrap());

        for d in new_dets {
            let mut tr = Tracklet::new(self.next_id, frame, &descriptors[d]);
            self.next_id += 1;
            if first_frame || cfg.min_hits <= 1 {
                tr.state = TrackState::Active;
                out.push(output(tr.track_id, &detections[d]));
            }
            self.tracklets.push(tr);
        }
        out.sort_by_key(|o| o.track_id);
        Ok(out)
    }

    /// Matches `tracks` (tracklet indices) against `dets` (detection
    /// indices); returns the unmatched remainder of each.
    fn match_subset(
        &self,
        tracks: &[usize],
        dets: &[usize],
        descriptors: &[PartDescriptor],
        matched: &mut Vec<(usize, usize)>,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let ts: Vec<&Tracklet> = tracks.iter().map(|&t| &self.tracklets[t]).collect();
        let ds: Vec<&PartDescriptor> = dets.iter().map(|&d| &descriptors[d]).collect();
        let a = associate(&ts, &ds, self.config.match_threshold)?;
        matched.extend(a.matches.iter().map(|&(t, d, _)| (tracks[t], dets[d])));
        Ok((
            a.unmatched_tracks.iter().map(|&t| tracks[t]).collect(),
            a.unmatched_dets.iter().map(|&d| dets[d]).collect(),
        ))
    }
}

fn output(track_id: u32, d: &Detection) -> TrackOutput {
    TrackOutput { frame: d.frame, track_id, bbox: d.bbox, confidence: d.confidence, keypoints: d.keypoints.clone() }
}

/// One frame of input: the image and its detections.
pub struct Frame<'a> {
    pub index: usize,
    pub image: &'a RgbImage,
    pub detections: &'a [Detection],
}

/// Per-frame confirmed tracks.
pub type TrackingResult = Vec<Vec<TrackOutput>>;

pub fn track_sequence(model: &KprModel, frames: &[Frame<'_>], config: &TrackerConfig) -> Result<TrackingResult> {
    let mut state = TrackerState::new(config.clone());
    let mut result = Vec::with_capacity(frames.len());
    for f in frames {
        let descriptors = if f.detections.is_empty() {
            Vec::new()
        } else {
            embed_detections(model, f.image, f.detections, config.prompts)?
        };
        result.push(state.step(f.index, f.detections, &descriptors)?);
    }
    Ok(result)
}

/// Tracker output as labelled boxes, for [`tracking_metrics`].
pub fn as_labeled(result: &TrackingResult) -> Vec<Vec<LabeledBox>> {
    result
        .iter()
        .map(|f| f.iter().map(|o| LabeledBox { id: o.track_id, bbox: o.bbox }).collect())
        .collect()
}
