//! On-disk dataset layout:
//!
//! ```text
//! root/metadata.json
//! root/{train,query,gallery}/<sample_id>.png          RGB image
//! root/{train,query,gallery}/<sample_id>.parsing.png  8-bit part labels
//! ```
//!
//! `metadata.json` lists every sample with its identity, source, split and
//! skeletons. Each skeleton carries an `is_target` flag; keypoints are
//! `[x, y, joint_id, visible, confidence]` arrays. When no skeleton of a
//! sample is flagged, the target is picked with
//! [`select_target_skeleton`](crate::geometry::select_target_skeleton).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Keypoint, KeypointSet, Sample, SplitName};
use crate::error::{Error, Result};
use crate::geometry::select_target_skeleton;

pub const METADATA_FILE: &str = "metadata.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub format_version: u32,
    pub num_parts: usize,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub split: SplitName,
    pub identity: u32,
    pub source_id: String,
    pub skeletons: Vec<SkeletonRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkeletonRecord {
    #[serde(default)]
    pub is_target: bool,
    pub keypoints: Vec<Keypoint>,
}

pub fn image_path(root: &Path, split: SplitName, sample_id: &str) -> PathBuf {
    root.join(split.as_str()).join(format!("{sample_id}.png"))
}

pub fn parsing_path(root: &Path, split: SplitName, sample_id: &str) -> PathBuf {
    root.join(split.as_str())
        .join(format!("{sample_id}.parsing.png"))
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::dataset(path, "file listed in metadata is missing"));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_dataset(split: &DatasetSplit, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let mut records = Vec::with_capacity(split.len());
    for name in SplitName::ALL {
        let dir = root.join(name.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for sample in split.split(name) {
            save_png(&sample.image, &image_path(root, name, &sample.id))?;
            save_png(&sample.parsing, &parsing_path(root, name, &sample.id))?;
            let mut skeletons = vec![SkeletonRecord {
                is_target: true,
                keypoints: sample.keypoints.positives.clone(),
            }];
            if !sample.keypoints.negatives.is_empty() {
                skeletons.push(SkeletonRecord {
                    is_target: false,
                    keypoints: sample.keypoints.negatives.clone(),
                });
            }
            records.push(SampleRecord {
                sample_id: sample.id.clone(),
                split: name,
                identity: sample.identity,
                source_id: sample.source_id.clone(),
                skeletons,
            });
        }
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        num_parts: split.num_parts,
        samples: records,
    };
    let path = root.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_metadata(root: &Path) -> Result<Metadata> {
    let path = root.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Metadata = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(&path, format!("malformed metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::dataset(
            &path,
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    Ok(meta)
}

fn keypoints_from_skeletons(
    record: &SampleRecord,
    height: usize,
    width: usize,
    meta_path: &Path,
) -> Result<KeypointSet> {
    let targets: Vec<_> = record.skeletons.iter().filter(|s| s.is_target).collect();
    match targets.len() {
        0 if record.skeletons.is_empty() => Ok(KeypointSet::default()),
        0 => {
            let all: Vec<Vec<Keypoint>> =
                record.skeletons.iter().map(|s| s.keypoints.clone()).collect();
            select_target_skeleton(&all, height, width)
                .map(|(_, set)| set)
                .map_err(|e| Error::dataset(meta_path, format!("{}: {e}", record.sample_id)))
        }
        1 => {
            let positives = targets[0].keypoints.clone();
            let negatives = record
                .skeletons
                .iter()
                .filter(|s| !s.is_target)
                .flat_map(|s| s.keypoints.iter().copied())
                .collect();
            Ok(KeypointSet::new(positives, negatives))
        }
        n => Err(Error::dataset(
            meta_path,
            format!("{}: {n} skeletons flagged is_target", record.sample_id),
        )),
    }
}

/// Loads one sample described by `record`.
pub fn load_sample(root: &Path, record: &SampleRecord, num_parts: usize) -> Result<Sample> {
    let img_path = image_path(root, record.split, &record.sample_id);
    let parse_path = parsing_path(root, record.split, &record.sample_id);
    let image: RgbImage = open_image(&img_path)?.to_rgb8();
    let parsing: GrayImage = open_image(&parse_path)?.to_luma8();
    if parsing.dimensions() != image.dimensions() {
        return Err(Error::dataset(
            &parse_path,
            format!(
                "parsing size {:?} differs from image size {:?}",
                parsing.dimensions(),
                image.dimensions()
            ),
        ));
    }
    if let Some(bad) = parsing.pixels().map(|p| p.0[0]).find(|&v| v as usize > num_parts) {
        return Err(Error::dataset(
            &parse_path,
            format!("parsing label {bad} exceeds K={num_parts}"),
        ));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let meta_path = root.join(METADATA_FILE);
    let keypoints = keypoints_from_skeletons(record, h, w, &meta_path)?;
    keypoints
        .validate(h, w)
        .map_err(|e| Error::dataset(&meta_path, format!("{}: {e}", record.sample_id)))?;
    Ok(Sample {
        id: record.sample_id.clone(),
        image,
        identity: record.identity,
        keypoints,
        parsing,
        source_id: record.source_id.clone(),
    })
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let meta = read_metadata(root)?;
    let mut split = DatasetSplit {
        num_parts: meta.num_parts,
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    for record in &meta.samples {
        if !seen.insert(record.sample_id.as_str()) {
            return Err(Error::dataset(
                root.join(METADATA_FILE),
                format!("duplicate sample_id {}", record.sample_id),
            ));
        }
        let sample = load_sample(root, record, meta.num_parts)?;
        match record.split {
            SplitName::Train => split.train.push(sample),
            SplitName::Query => split.query.push(sample),
            SplitName::Gallery => split.gallery.push(sample),
        }
    }
    Ok(split)
}

/// Loads only the samples of one split.
pub fn load_split(root: impl AsRef<Path>, name: SplitName) -> Result<(usize, Vec<Sample>)> {
    let root = root.as_ref();
    let meta = read_metadata(root)?;
    let samples = meta
        .samples
        .iter()
        .filter(|r| r.split == name)
        .map(|r| load_sample(root, r, meta.num_parts))
        .collect::<Result<Vec<_>>>()?;
    Ok((meta.num_parts, samples))
}
