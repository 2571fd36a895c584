mod common;

use itertools::Itertools;
use kpr::datamodel::Keypoint;
use kpr::model::head::PartDescriptor;
use kpr::tracker::hungarian::assign;
use kpr::tracker::*;
use proptest::prelude::*;

#[test]
fn hota_toy_case_matches_hand_computation() {
    let (err, switches) = common::hota_toy_case();
    assert!(err < 1e-6, "{err:e}");
    assert_eq!(switches, 1);
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    if r <= c {
        (0..c).permutations(r).map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>()).fold(f64::INFINITY, f64::min)
    } else {
        (0..r).permutations(c).map(|p| p.iter().enumerate().map(|(j, &i)| cost[i][j]).sum::<f64>()).fold(f64::INFINITY, f64::min)
    }
}

fn matrix(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(0.0f64..2.0, c), r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hungarian_equals_exhaustive_permutations(cost in matrix(6)) {
        let pairs = assign(&cost).unwrap();
        prop_assert_eq!(pairs.len(), cost.len().min(cost[0].len()));
        prop_assert!(pairs.iter().map(|p| p.0).all_unique());
        prop_assert!(pairs.iter().map(|p| p.1).all_unique());
        let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
    }

    #[test]
    fn integer_costs_are_exact(cost in (1..=6usize).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0u32..20, n), n))) {
        let cost: Vec<Vec<f64>> = cost.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        let total: f64 = assign(&cost).unwrap().iter().map(|&(i, j)| cost[i][j]).sum();
        prop_assert_eq!(total, brute_force(&cost));
    }

    #[test]
    fn associate_is_optimal_before_gating(cost in matrix(6)) {
        let a = associate_costs(&cost, cost.len(), cost[0].len(), f64::INFINITY).unwrap();
        let total: f64 = a.matches.iter().map(|m| m.2).sum();
        prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        let gated = associate_costs(&cost, cost.len(), cost[0].len(), 0.5).unwrap();
        prop_assert!(gated.matches.iter().all(|m| m.2 <= 0.5));
        prop_assert_eq!(gated.matches.len() + gated.unmatched_tracks.len(), cost.len());
        prop_assert_eq!(gated.matches.len() + gated.unmatched_dets.len(), cost[0].len());
    }

    #[test]
    fn tracklet_features_are_the_running_mean(xs in prop::collection::vec(prop::collection::vec(0.01f32..1.0, 3), 1..12)) {
        let d = |f: &Vec<f32>| PartDescriptor { f: vec![f.clone()], v: vec![true], attention: None };
        let mut t = Tracklet::new(1, 0, &d(&xs[0]));
        for (i, x) in xs.iter().enumerate().skip(1) {
            update_tracklet(&mut t, &d(x), i);
        }
        for c in 0..3 {
            let mean = xs.iter().map(|x| x[c] as f64).sum::<f64>() / xs.len() as f64;
            prop_assert!(((t.part_feats[0][c] as f64) - mean).abs() <= 1e-6 * mean.abs().max(1.0));
        }
        prop_assert_eq!(t.part_counts[0] as usize, xs.len());
    }
}

fn det(frame: usize, x: f32) -> Detection {
    Detection {
        frame,
        bbox: BBox { x, y: 0.0, w: 16.0, h: 32.0 },
        confidence: 0.9,
        keypoints: (0..17).map(|j| Keypoint::new(x + 8.0, 2.0 + j as f32, j as u8)).collect(),
        crossing_skeletons: Vec::new(),
    }
}

fn unit(i: usize, n: usize) -> PartDescriptor {
    let mut f = vec![vec![0.01; n]; 3];
    for p in &mut f {
        p[i] = 1.0;
    }
    PartDescriptor { f, v: vec![true; 3], attention: None }
}

#[test]
fn single_person_is_one_track_without_switches() {
    let mut s = TrackerState::new(TrackerConfig::default());
    let mut out = Vec::new();
    let mut gt = Vec::new();
    for t in 0..10 {
        let d = det(t, t as f32 * 2.0);
        out.push(s.step(t, &[d.clone()], &[unit(0, 4)]).unwrap());
        gt.push(vec![LabeledBox { id: 1, bbox: d.bbox }]);
    }
    assert!(out.iter().flatten().all(|o| o.track_id == 1));
    let m = tracking_metrics(&as_labeled(&out), &gt).unwrap();
    assert_eq!(m.id_switches, 0);
    assert!((m.hota - 1.0).abs() < 1e-12);
}

#[test]
fn concurrent_tracks_have_unique_ids() {
    let mut s = TrackerState::new(TrackerConfig::default());
    for t in 0..12 {
        // Shuffle which appearance comes first; drop one person every third frame.
        let mut dets = vec![(det(t, 0.0), unit(0, 4)), (det(t, 40.0), unit(1, 4)), (det(t, 80.0), unit(2, 4))];
        dets.rotate_left(t % 3);
        if t % 3 == 2 {
            dets.pop();
        }
        let (d, p): (Vec<_>, Vec<_>) = dets.into_iter().unzip();
        let out = s.step(t, &d, &p).unwrap();
        assert!(out.iter().map(|o| o.track_id).all_unique());
        assert!(s.tracklets.iter().map(|t| t.track_id).all_unique());
    }
    assert_eq!(s.tracklets.len(), 3);
}

#[test]
fn empty_frame_only_adds_misses() {
    let mut s = TrackerState::new(TrackerConfig { miss_budget: 3, ..TrackerConfig::default() });
    s.step(0, &[det(0, 0.0), det(0, 40.0)], &[unit(0, 4), unit(1, 4)]).unwrap();
    let out = s.step(1, &[], &[]).unwrap();
    assert!(out.is_empty());
    assert!(s.tracklets.iter().all(|t| t.misses == 1 && t.state == TrackState::Active));
}
