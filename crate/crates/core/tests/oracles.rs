mod common;

use candle_core::{Device, Tensor};
use kpr::augment::{bipo, DEFAULT_BIPO_P};
use kpr::datamodel::{generate_synthetic_dataset, Sample, SynthConfig};
use kpr::losses::batch_hard_triplet;
use kpr::retrieval::average_precision;
use proptest::prelude::*;

#[test]
fn retrieval_metrics_match_brute_force() {
    let o = common::retrieval_oracle(100, 1);
    assert!(o.max_ap_error <= 1e-9, "AP error {:e}", o.max_ap_error);
    assert!(o.max_metric_error <= 1e-9, "mAP/CMC error {:e}", o.max_metric_error);
}

#[test]
fn heatmaps_match_the_closed_form() {
    let o = common::heatmap_oracle(60, 2);
    assert!(o.inside_support <= 1e-6, "{:e}", o.inside_support);
    // What the 3-sigma cutoff leaves out: exp(-4.5).
    assert!(o.outside_support <= (-4.5f64).exp() + 1e-9, "{}", o.outside_support);
}

#[test]
fn hungarian_matches_exhaustive_search() {
    assert_eq!(common::hungarian_mismatches(300, 3), 0);
}

/// Per anchor, the largest hinge over every (positive, negative) pair.
fn exhaustive_triplet(d: &[Vec<f64>], labels: &[u32], margin: f64) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                worst = worst.max((d[a][p] - d[a][q] + margin).max(0.0));
            }
        }
        total += worst;
    }
    total / n as f64
}

#[test]
fn hand_set_triplet_case() {
    // Two ids by two instances, distances picked by hand.
    let d = vec![
        vec![0.0, 0.3, 0.2, 0.9],
        vec![0.3, 0.0, 0.8, 0.1],
        vec![0.2, 0.8, 0.0, 0.5],
        vec![0.9, 0.1, 0.5, 0.0],
    ];
    let labels = [0, 0, 1, 1];
    let t = Tensor::from_vec(d.concat(), (4, 4), &Device::Cpu).unwrap();
    let (l, pos, neg) = batch_hard_triplet(&t, &labels, 0.3).unwrap();
    assert_eq!(pos, vec![1, 0, 3, 2]);
    assert_eq!(neg, vec![2, 3, 0, 1]);
    // Hinges: 0.3-0.2+0.3, 0.3-0.1+0.3, 0.5-0.2+0.3, 0.5-0.1+0.3.
    let expect = (0.4 + 0.5 + 0.6 + 0.7) / 4.0;
    assert!((l.to_scalar::<f64>().unwrap() - expect).abs() < 1e-12);
    assert!((exhaustive_triplet(&d, &labels, 0.3) - expect).abs() < 1e-12);
}

fn relevance_list() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn batch_hard_equals_exhaustive_triplets(
        (ids, per, vals) in (2usize..4, 2usize..4).prop_flat_map(|(i, p)| (Just(i), Just(p), prop::collection::vec(0.0f64..2.0, (i * p) * (i * p))))
    ) {
        let n = ids * per;
        let labels: Vec<u32> = (0..n).map(|i| (i / per) as u32).collect();
        let d: Vec<Vec<f64>> = vals.chunks(n).map(|r| r.to_vec()).collect();
        let t = Tensor::from_vec(vals.clone(), (n, n), &Device::Cpu).unwrap();
        let (l, _, _) = batch_hard_triplet(&t, &labels, 0.3).unwrap();
        prop_assert!((l.to_scalar::<f64>().unwrap() - exhaustive_triplet(&d, &labels, 0.3)).abs() < 1e-12);
    }

    /// Moving a relevant item one place up never lowers AP.
    #[test]
    fn ap_rises_when_a_hit_moves_up(rel in relevance_list(), at in 0usize..40) {
        let i = at % rel.len();
        prop_assume!(i > 0 && rel[i] && !rel[i - 1]);
        let mut better = rel.clone();
        better.swap(i - 1, i);
        let (a, _) = average_precision(&rel).unwrap();
        let (b, _) = average_precision(&better).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn ap_is_bounded_and_one_for_a_perfect_ranking(rel in relevance_list()) {
        match average_precision(&rel) {
            None => prop_assert!(rel.iter().all(|&r| !r)),
            Some((ap, first)) => {
                prop_assert!(ap > 0.0 && ap <= 1.0);
                prop_assert!(rel[first - 1] && rel[..first - 1].iter().all(|&r| !r));
                let mut sorted = rel.clone();
                sorted.sort_by(|a, b| b.cmp(a));
                prop_assert_eq!(average_precision(&sorted).unwrap().0, 1.0);
            }
        }
    }
}

fn batch() -> Vec<Sample> {
    generate_synthetic_dataset(&SynthConfig { identities: 8, images_per_identity: 4, occlusion_p: 0.0, seed: 7, ..SynthConfig::default() })
        .unwrap()
        .train
}

#[test]
fn bipo_fires_at_rate_p() {
    let b = batch();
    let n = 10_000;
    let fired = (0..n).filter(|&i| bipo(&b[i % b.len()], &b, DEFAULT_BIPO_P, i as u64).applied).count();
    let rate = fired as f64 / n as f64;
    assert!((rate - DEFAULT_BIPO_P).abs() <= 0.02, "rate {rate}");
}

#[test]
fn bipo_keeps_image_prompt_and_parsing_consistent() {
    let b = batch();
    let mut applied = 0;
    for seed in 0..300u64 {
        let s = &b[seed as usize % b.len()];
        let r = bipo(s, &b, 1.0, seed);
        if !r.applied {
            continue;
        }
        applied += 1;
        let out = &r.sample;
        let (h, w) = (out.height(), out.width());
        for k in out.keypoints.positives.iter().filter(|k| k.visible) {
            let near_body = (0..h).any(|y| {
                (0..w).any(|x| {
                    out.parsing.get_pixel(x as u32, y as u32).0[0] != 0
                        && (x as f32 - k.x).powi(2) + (y as f32 - k.y).powi(2) <= 16.0
                })
            });
            assert!(near_body, "seed {seed}: positive {k:?} off the body");
        }
        let (x0, y0, x1, y1) = r.mask_bbox.unwrap();
        let added = &out.keypoints.negatives[s.keypoints.negatives.len()..];
        for k in added {
            assert!(k.x >= x0 as f32 && k.y >= y0 as f32 && k.x < (x1 + 1) as f32 && k.y < (y1 + 1) as f32);
        }
        // Parsing only ever changes to background.
        for (a, c) in s.parsing.pixels().zip(out.parsing.pixels()) {
            assert!(a == c || c.0[0] == 0);
        }
    }
    assert!(applied > 250);
}

#[test]
fn bipo_is_deterministic_under_seed() {
    let b = batch();
    for seed in 0..20 {
        let x = bipo(&b[0], &b, 0.5, seed);
        let y = bipo(&b[0], &b, 0.5, seed);
        assert_eq!(x.sample, y.sample);
        assert_eq!(x.mask_bbox, y.mask_bbox);
    }
}
