//! HOTA (with DetA / AssA) averaged over IoU thresholds 0.05..=0.95, and
//! CLEAR-style identity switches.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::hungarian::assign;
use super::BBox;
use crate::error::{Error, Result};

/// One box with an identity, in either ground truth or tracker output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    #[serde(rename = "HOTA")]
    pub hota: f64,
    #[serde(rename = "DetA")]
    pub det_a: f64,
    #[serde(rename = "AssA")]
    pub ass_a: f64,
    #[serde(rename = "IDs")]
    pub id_switches: usize,
}

const EPS: f64 = 1e-12;
/// IoU needed for a CLEAR match.
const CLEAR_IOU: f64 = 0.5;

pub fn alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1) = (a.x as f64 + a.w as f64, a.y as f64 + a.h as f64);
    let (bx1, by1) = (b.x as f64 + b.w as f64, b.y as f64 + b.h as f64);
    let iw = (ax1.min(bx1) - (a.x as f64).max(b.x as f64)).max(0.0);
    let ih = (ay1.min(by1) - (a.y as f64).max(b.y as f64)).max(0.0);
    let inter = iw * ih;
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn similarity(gt: &[LabeledBox], pr: &[LabeledBox]) -> Vec<Vec<f64>> {
    gt.iter().map(|g| pr.iter().map(|p| iou(&g.bbox, &p.bbox)).collect()).collect()
}

/// Per-frame boxes; both sequences must have the same number of frames.
pub fn tracking_metrics(predicted: &[Vec<LabeledBox>], ground_truth: &[Vec<LabeledBox>]) -> Result<TrackingMetrics> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "{} predicted frames vs {} ground-truth frames",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let (hota, det_a, ass_a) = hota(predicted, ground_truth)?;
    Ok(TrackingMetrics { hota, det_a, ass_a, id_switches: id_switches(predicted, ground_truth)? })
}

fn hota(predicted: &[Vec<LabeledBox>], ground_truth: &[Vec<LabeledBox>]) -> Result<(f64, f64, f64)> {
    // Global alignment between every gt/tracker id pair.
    let mut gt_count: HashMap<u32, f64> = HashMap::new();
    let mut pr_count: HashMap<u32, f64> = HashMap::new();
    let mut potential: HashMap<(u32, u32), f64> = HashMap::new();
    for (gt, pr) in ground_truth.iter().zip(predicted) {
        for g in gt {
            *gt_count.entry(g.id).or_default() += 1.0;
        }
        for p in pr {
            *pr_count.entry(p.id).or_default() += 1.0;
        }
        let sim = similarity(gt, pr);
        let row_sum: Vec<f64> = sim.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<f64> = (0..pr.len()).map(|j| sim.iter().map(|r| r[j]).sum()).collect();
        for (i, g) in gt.iter().enumerate() {
            for (j, p) in pr.iter().enumerate() {
                let denom = row_sum[i] + col_sum[j] - sim[i][j];
                if denom > EPS {
                    *potential.entry((g.id, p.id)).or_default() += sim[i][j] / denom;
                }
            }
        }
    }
    let align = |g: u32, p: u32| {
        let pm = potential.get(&(g, p)).copied().unwrap_or(0.0);
        let denom = gt_count[&g] + pr_count[&p] - pm;
        if denom > EPS {
            pm / denom
        } else {
            0.0
        }
    };

    let alphas = alphas();
    let mut tp = vec![0.0; alphas.len()];
    let mut fn_ = vec![0.0; alphas.len()];
    let mut fp = vec![0.0; alphas.len()];
    let mut matches: Vec<BTreeMap<(u32, u32), f64>> = vec![BTreeMap::new(); alphas.len()];
    for (gt, pr) in ground_truth.iter().zip(predicted) {
        let sim = similarity(gt, pr);
        let pairs = if gt.is_empty() || pr.is_empty() {
            Vec::new()
        } else {
            let cost: Vec<Vec<f64>> = gt
                .iter()
                .enumerate()
                .map(|(i, g)| pr.iter().enumerate().map(|(j, p)| -align(g.id, p.id) * sim[i][j]).collect())
                .collect();
            assign(&cost)?
        };
        for (a, &alpha) in alphas.iter().enumerate() {
            let hits: Vec<_> = pairs.iter().filter(|&&(i, j)| sim[i][j] >= alpha - EPS).collect();
            tp[a] += hits.len() as f64;
            fn_[a] += (gt.len() - hits.len()) as f64;
            fp[a] += (pr.len() - hits.len()) as f64;
            for &&(i, j) in &hits {
                *matches[a].entry((gt[i].id, pr[j].id)).or_default() += 1.0;
            }
        }
    }

    let mut hota_sum = 0.0;
    let mut det_sum = 0.0;
    let mut ass_sum = 0.0;
    for a in 0..alphas.len() {
        let det = tp[a] / (tp[a] + fn_[a] + fp[a]).max(1.0);
        let ass = matches[a]
            .iter()
            .map(|(&(g, p), &c)| c * c / (gt_count[&g] + pr_count[&p] - c))
            .sum::<f64>()
            / tp[a].max(1.0);
        det_sum += det;
        ass_sum += ass;
        hota_sum += (det * ass).sqrt();
    }
    let n = alphas.len() as f64;
    Ok((hota_sum / n, det_sum / n, ass_sum / n))
}

/// Counts, per ground-truth track, how often its matched tracker id changes
/// from the last one it was matched to. Matching prefers continuing the
/// previous pairing, then IoU, among pairs with IoU >= 0.5.
fn id_switches(predicted: &[Vec<LabeledBox>], ground_truth: &[Vec<LabeledBox>]) -> Result<usize> {
    let mut last: HashMap<u32, u32> = HashMap::new();
    let mut switches = 0;
    for (gt, pr) in ground_truth.iter().zip(predicted) {
        if gt.is_empty() || pr.is_empty() {
            continue;
        }
        let sim = similarity(gt, pr);
        let cost: Vec<Vec<f64>> = gt
            .iter()
            .enumerate()
            .map(|(i, g)| {
                pr.iter()
                    .enumerate()
                    .map(|(j, p)| {
                        if sim[i][j] < CLEAR_IOU - EPS {
                            0.0
                        } else {
                            let keep = if last.get(&g.id) == Some(&p.id) { 1000.0 } else { 0.0 };
                            -(keep + 1.0 + sim[i][j])
                        }
                    })
                    .collect()
            })
            .collect();
        for (i, j) in assign(&cost)? {
            if sim[i][j] < CLEAR_IOU - EPS {
                continue;
            }
            let (g, p) = (gt[i].id, pr[j].id);
            if let Some(&prev) = last.get(&g) {
                if prev != p {
                    switches += 1;
                }
            }
            last.insert(g, p);
        }
    }
    Ok(switches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(id: u32, x: f32, y: f32, w: f32, h: f32) -> LabeledBox {
        LabeledBox { id, bbox: BBox { x, y, w, h } }
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let gt = vec![
            vec![b(1, 0.0, 0.0, 10.0, 20.0), b(2, 30.0, 0.0, 10.0, 20.0)],
            vec![b(1, 2.0, 0.0, 10.0, 20.0), b(2, 28.0, 0.0, 10.0, 20.0)],
        ];
        let pr: Vec<Vec<_>> = gt.iter().map(|f| f.iter().map(|x| LabeledBox { id: x.id + 10, ..*x }).collect()).collect();
        let m = tracking_metrics(&pr, &gt).unwrap();
        assert!((m.hota - 1.0).abs() < 1e-12 && (m.det_a - 1.0).abs() < 1e-12 && (m.ass_a - 1.0).abs() < 1e-12);
        assert_eq!(m.id_switches, 0);
    }

    #[test]
    fn half_track_under_second_id_is_one_switch() {
        let gt: Vec<Vec<_>> = (0..4).map(|t| vec![b(1, t as f32, 0.0, 10.0, 20.0)]).collect();
        let pr: Vec<Vec<_>> = (0..4).map(|t| vec![b(if t < 2 { 5 } else { 6 }, t as f32, 0.0, 10.0, 20.0)]).collect();
        assert_eq!(tracking_metrics(&pr, &gt).unwrap().id_switches, 1);
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        assert!(tracking_metrics(&[vec![]], &[]).is_err());
    }

    #[test]
    fn iou_of_half_overlap() {
        let a = BBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 };
        let c = BBox { x: 0.0, y: 0.0, w: 10.0, h: 5.0 };
        assert_eq!(iou(&a, &c), 0.5);
        assert_eq!(iou(&a, &BBox { x: 20.0, ..a }), 0.0);
    }
}
