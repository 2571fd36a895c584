//! Detections as JSON lines in; MOT-style CSV plus a keypoint sidecar out.

use std::io::{BufRead, Write};
use std::path::Path;

use super::metrics::LabeledBox;
use super::{BBox, Detection, TrackingResult};
use crate::error::{Error, Result};

/// Parses one detection per non-empty line.
pub fn parse_detections(reader: impl BufRead) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection =
            serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("detections line {}: {e}", n + 1)))?;
        out.push(d);
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_detections(std::io::BufReader::new(f))
}

/// Groups detections by frame index, `0..=max frame`.
pub fn group_by_frame(dets: Vec<Detection>, num_frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut frames = vec![Vec::new(); num_frames];
    for d in dets {
        let slot = frames
            .get_mut(d.frame)
            .ok_or_else(|| Error::Invalid(format!("detection for frame {} of {num_frames}", d.frame)))?;
        slot.push(d);
    }
    Ok(frames)
}

pub fn write_detections(dets: &[Detection], mut w: impl Write) -> Result<()> {
    for d in dets {
        writeln!(w, "{}", serde_json::to_string(d)?).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

/// `frame,id,x,y,w,h,conf,-1,-1,-1` rows, frames numbered as in the input.
pub fn write_mot_csv(result: &TrackingResult, w: impl Write) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for o in result.iter().flatten() {
        csv.write_record([
            o.frame.to_string(),
            o.track_id.to_string(),
            format!("{:.2}", o.bbox.x),
            format!("{:.2}", o.bbox.y),
            format!("{:.2}", o.bbox.w),
            format!("{:.2}", o.bbox.h),
            format!("{:.3}", o.confidence),
            "-1".into(),
            "-1".into(),
            "-1".into(),
        ])?;
    }
    csv.flush().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(())
}

/// One JSON line per output track: frame, id and keypoints.
pub fn write_keypoint_sidecar(result: &TrackingResult, mut w: impl Write) -> Result<()> {
    for o in result.iter().flatten() {
        let rec = serde_json::json!({ "frame": o.frame, "id": o.track_id, "keypoints": o.keypoints });
        writeln!(w, "{rec}").map_err(|e| Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

/// Ground truth as `frame,id,x,y,w,h` rows.
pub fn write_ground_truth(gt: &[Vec<LabeledBox>], w: impl Write) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for (t, boxes) in gt.iter().enumerate() {
        for b in boxes {
            csv.write_record([
                t.to_string(),
                b.id.to_string(),
                b.bbox.x.to_string(),
                b.bbox.y.to_string(),
                b.bbox.w.to_string(),
                b.bbox.h.to_string(),
            ])?;
        }
    }
    csv.flush().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(())
}

/// Reads MOT-style rows (`frame,id,x,y,w,h[,...]`) into per-frame boxes.
/// Extra columns are ignored.
pub fn parse_ground_truth(r: impl std::io::Read, num_frames: usize) -> Result<Vec<Vec<LabeledBox>>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
    let mut out = vec![Vec::new(); num_frames];
    for (n, rec) in csv.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Invalid(format!("ground truth row {}: column {} missing or not a number", n + 1, i + 1)))
        };
        let frame = field(0)? as usize;
        let slot = out
            .get_mut(frame)
            .ok_or_else(|| Error::Invalid(format!("ground truth row {}: frame {frame} of {num_frames}", n + 1)))?;
        slot.push(LabeledBox {
            id: field(1)? as u32,
            bbox: BBox { x: field(2)? as f32, y: field(3)? as f32, w: field(4)? as f32, h: field(5)? as f32 },
        });
    }
    Ok(out)
}

pub fn read_ground_truth(path: impl AsRef<Path>, num_frames: usize) -> Result<Vec<Vec<LabeledBox>>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(f, num_frames)
}
