//! Checks shared by the property tests and the acceptance target. Each one
//! returns the measured quantity so callers choose how to report it.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use image::RgbImage;
use kpr::config::RunConfig;
use kpr::datamodel::{Keypoint, KeypointSet, Sample};
use kpr::geometry::{render_heatmaps, PartGrouping, KERNEL_CUTOFF_SIGMAS};
use kpr::losses::{
    batch_hard_triplet, identity_loss, part_distance_matrix, part_prediction_loss, total_loss,
};
use kpr::model::encoder::{fuse, Encoder, EncoderConfig, StageConfig};
use kpr::model::head::PartDescriptor;
use kpr::model::nn::ParamStore;
use kpr::model::{ForwardCtx, KprModel, ModelConfig};
use kpr::retrieval::{evaluate, GalleryIndex, IndexEntry, Query};
use kpr::tracker::hungarian::assign;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- retrieval

/// Cosine distance averaged over mutually visible parts, written out from
/// the definition.
fn oracle_distance(a: &PartDescriptor, b: &PartDescriptor) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for p in 0..a.f.len() {
        if !(a.v[p] && b.v[p]) {
            continue;
        }
        let dot: f64 = a.f[p].iter().zip(&b.f[p]).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.f[p].iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.f[p].iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        total += 1.0 - dot / (na * nb);
        n += 1;
    }
    if n == 0 {
        2.0
    } else {
        total / n as f64
    }
}

pub struct RetrievalOracle {
    pub max_ap_error: f64,
    pub max_metric_error: f64,
}

fn random_descriptor(r: &mut ChaCha8Rng, parts: usize, dim: usize) -> PartDescriptor {
    let f = (0..parts).map(|_| (0..dim).map(|_| r.random_range(0.05f32..1.0)).collect()).collect();
    let v = (0..parts).map(|_| r.random_bool(0.7)).collect();
    PartDescriptor { f, v, attention: None }
}

/// mAP and CMC from `evaluate` against a brute-force computation that ranks
/// every gallery item by counting the items ahead of it, on random instances
/// of at most 20 queries by 50 gallery items.
pub fn retrieval_oracle(instances: usize, seed: u64) -> RetrievalOracle {
    let mut r = rng(seed);
    let mut out = RetrievalOracle { max_ap_error: 0.0, max_metric_error: 0.0 };
    for _ in 0..instances {
        let (parts, dim) = (r.random_range(1..5), r.random_range(1..6));
        let ids = r.random_range(2..8u32);
        let ng = r.random_range(1..=50);
        let nq = r.random_range(1..=20);
        let gallery: Vec<IndexEntry> = (0..ng)
            .map(|i| IndexEntry {
                sample_id: format!("g{i:03}"),
                identity: r.random_range(0..ids),
                source_id: String::new(),
                descriptor: random_descriptor(&mut r, parts, dim),
            })
            .collect();
        let queries: Vec<Query> = (0..nq)
            .map(|i| {
                // Some queries reuse a gallery id and must not retrieve themselves.
                let self_in_gallery = r.random_bool(0.2);
                let g = r.random_range(0..ng);
                Query {
                    sample_id: if self_in_gallery { gallery[g].sample_id.clone() } else { format!("q{i:03}") },
                    identity: if self_in_gallery { gallery[g].identity } else { r.random_range(0..ids) },
                    descriptor: random_descriptor(&mut r, parts, dim),
                    mpol: None,
                    multi_person: false,
                }
            })
            .collect();
        let index = GalleryIndex::new(gallery.clone()).unwrap();
        let report = evaluate(&queries, &index).unwrap();

        let (mut aps, mut hits) = (Vec::new(), Vec::new());
        for q in &queries {
            let items: Vec<(f64, &str, bool)> = gallery
                .iter()
                .filter(|g| g.sample_id != q.sample_id)
                .map(|g| (oracle_distance(&q.descriptor, &g.descriptor), g.sample_id.as_str(), g.identity == q.identity))
                .collect();
            let ahead = |a: &(f64, &str, bool), b: &(f64, &str, bool)| b.0 < a.0 || (b.0 == a.0 && b.1 < a.1);
            let mut precisions = Vec::new();
            let mut best = usize::MAX;
            for it in items.iter().filter(|it| it.2) {
                let rank = 1 + items.iter().filter(|o| ahead(it, o)).count();
                let rel_upto = 1 + items.iter().filter(|o| o.2 && ahead(it, o)).count();
                precisions.push(rel_upto as f64 / rank as f64);
                best = best.min(rank);
            }
            if precisions.is_empty() {
                continue;
            }
            aps.push(precisions.iter().sum::<f64>() / precisions.len() as f64);
            hits.push(best);
        }
        assert_eq!(aps.len(), report.per_query.len());
        for (a, q) in aps.iter().zip(&report.per_query) {
            out.max_ap_error = out.max_ap_error.max((a - q.ap).abs());
        }
        let n = aps.len().max(1) as f64;
        let cmc = |k: usize| hits.iter().filter(|&&h| h <= k).count() as f64 / n;
        let map = aps.iter().sum::<f64>() / n;
        for err in [map - report.map, cmc(1) - report.rank1, cmc(3) - report.rank3, cmc(5) - report.rank5] {
            out.max_metric_error = out.max_metric_error.max(err.abs());
        }
    }
    out
}

// ---------------------------------------------------------------- heatmaps

pub struct HeatmapOracle {
    /// Largest deviation from the untruncated Gaussian on cells inside some
    /// kernel's support.
    pub inside_support: f64,
    /// Largest value the closed form takes on cells left at zero by the
    /// cutoff.
    pub outside_support: f64,
}

/// Renders random prompts and compares every cell with
/// `max_k exp(-|p - k|^2 / (2 sigma^2))` over the channel's keypoints.
pub fn heatmap_oracle(cases: usize, seed: u64) -> HeatmapOracle {
    let mut r = rng(seed);
    let grouping = PartGrouping::coco_k8();
    let mut out = HeatmapOracle { inside_support: 0.0, outside_support: 0.0 };
    for _ in 0..cases {
        let h = 4 * r.random_range(4..17);
        let w = 4 * r.random_range(2..9);
        let alpha = r.random_range(0.05f32..0.3);
        let kp = |r: &mut ChaCha8Rng| {
            let k = Keypoint::new(r.random_range(0.0..(w - 1) as f32), r.random_range(0.0..(h - 1) as f32), r.random_range(0..17u8));
            Keypoint { visible: !r.random_bool(0.15), ..k }
        };
        let n_pos = r.random_range(0..8);
        let positives: Vec<Keypoint> = (0..n_pos).map(|_| kp(&mut r)).collect();
        let n_neg = r.random_range(0..4);
        let negatives: Vec<Keypoint> = (0..n_neg).map(|_| kp(&mut r)).collect();
        let set = KeypointSet::new(positives.clone(), negatives.clone());
        let maps = render_heatmaps(&set, &grouping, h, w, alpha).unwrap();
        let sigma = alpha as f64 * w as f64;
        let radius = KERNEL_CUTOFF_SIGMAS as f64 * sigma;
        let mut by_channel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); grouping.num_parts() + 1];
        for k in negatives.iter().filter(|k| k.visible) {
            by_channel[0].push((k.x as f64, k.y as f64));
        }
        for k in positives.iter().filter(|k| k.visible) {
            by_channel[grouping.part_of(k.joint_id).unwrap()].push((k.x as f64, k.y as f64));
        }
        for (c, pts) in by_channel.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = |&(kx, ky): &(f64, f64)| (x as f64 - kx).powi(2) + (y as f64 - ky).powi(2);
                    let closed = pts.iter().map(|p| (-d2(p) / (2.0 * sigma * sigma)).exp()).fold(0.0, f64::max);
                    let got = maps.get(c, y, x) as f64;
                    if pts.iter().any(|p| d2(p) <= radius * radius) {
                        out.inside_support = out.inside_support.max((got - closed).abs());
                    } else {
                        assert_eq!(got, 0.0);
                        out.outside_support = out.outside_support.max(closed);
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- hungarian

fn permutation_minimum(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    // Enumerate over the shorter side.
    if cost.len() <= cost[0].len() {
        go(cost, 0, &mut vec![false; cost[0].len()])
    } else {
        let t: Vec<Vec<f64>> = (0..cost[0].len()).map(|j| cost.iter().map(|r| r[j]).collect()).collect();
        go(&t, 0, &mut vec![false; cost.len()])
    }
}

/// Number of random integer-cost matrices (up to 6x6) on which the assignment
/// total differs from the exhaustive minimum.
pub fn hungarian_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=6));
            let cost: Vec<Vec<f64>> =
                (0..rows).map(|_| (0..cols).map(|_| r.random_range(0..50) as f64).collect()).collect();
            let total: f64 = assign(&cost).unwrap().iter().map(|&(i, j)| cost[i][j]).sum();
            total != permutation_minimum(&cost)
        })
        .count()
}

// ---------------------------------------------------------------- gradients

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error `|a - b| / max(|a|, |b|)` of two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over `vars` between autograd and central differences
/// of `loss`, sampling up to `per_var` entries of each variable. Returns the
/// error and the name of the variable it occurred on.
pub fn grad_check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, per_var: usize) -> (f64, String) {
    let grads = loss().backward().unwrap();
    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for (name, var) in vars {
        let Some(g) = grads.get(var) else { continue };
        let analytic = values(g);
        let base = values(var.as_tensor());
        let stride = (base.len() / per_var).max(1);
        let picked: Vec<usize> = (0..base.len()).step_by(stride).take(per_var).collect();
        let eval = |i: usize, delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric: Vec<f64> = picked.iter().map(|&i| (eval(i, h) - eval(i, -h)) / (2.0 * h)).collect();
        var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
        let a: Vec<f64> = picked.iter().map(|&i| analytic[i]).collect();
        let e = relative_error(&numeric, &a);
        if e > worst.0 {
            worst = (e, name.clone());
        }
    }
    worst
}

fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Overwrites every trainable parameter under `prefix` with random values, so
/// that zero-initialised layers also carry gradient to their inputs.
fn randomise(store: &ParamStore, prefix: &str, r: &mut ChaCha8Rng) {
    for (name, var) in store.trainable() {
        if name.starts_with(prefix) {
            var.set(&normal_tensor(r, var.dims(), 0.3).to_dtype(var.dtype()).unwrap()).unwrap();
        }
    }
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        in_dim: 8,
        out_dim: 8,
        stages: vec![
            StageConfig { depth: 2, heads: 2, window: 2 },
            StageConfig { depth: 1, heads: 2, window: 2 },
        ],
        ..EncoderConfig::default()
    }
}

/// Tokenizers plus windowed stages plus multi-scale fusion in f64, checked
/// with respect to the pixels, the heatmaps and every parameter.
pub fn encoder_grad_error() -> (f64, String) {
    let mut r = rng(21);
    let store = ParamStore::new(DType::F64, 4);
    let enc = Encoder::new(&store.root().pp("encoder"), &tiny_encoder_config(), 16, 16, Some(9)).unwrap();
    randomise(&store, "encoder.prompt_embed", &mut r);
    let images = Var::from_tensor(&normal_tensor(&mut r, &[2, 16, 16, 3], 1.0)).unwrap();
    let heat = Var::from_tensor(&normal_tensor(&mut r, &[2, 16, 16, 9], 0.5)).unwrap();
    let w = normal_tensor(&mut r, &[2, 4, 4, 8], 1.0);
    let loss = || {
        let img = enc.tokenize_image(images.as_tensor()).unwrap();
        let p = enc.tokenize_prompt(heat.as_tensor()).unwrap();
        let f = enc.encode(&fuse(&img, Some(&p)).unwrap(), &mut ForwardCtx::eval()).unwrap();
        (f * &w).unwrap().sum_all().unwrap()
    };
    let mut vars = vec![("images".to_string(), images.clone()), ("heatmaps".to_string(), heat.clone())];
    vars.extend(store.trainable());
    grad_check(&vars, &loss, 12)
}

pub fn tiny_run_config() -> RunConfig {
    RunConfig {
        height: 16,
        width: 16,
        in_dim: 8,
        out_dim: 8,
        embed_dim: 4,
        stage_depths: vec![2, 1],
        stage_heads: vec![2, 2],
        window: 2,
        seed: 9,
        ..RunConfig::default()
    }
}

fn random_image(r: &mut ChaCha8Rng, h: u32, w: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| image::Rgb([r.random(), r.random(), r.random()]))
}

fn random_prompt(r: &mut ChaCha8Rng, h: usize, w: usize) -> KeypointSet {
    let mut kp = |j: u8| Keypoint::new(r.random_range(0.0..(w - 1) as f32), r.random_range(0.0..(h - 1) as f32), j);
    let pos = (0..17).map(&mut kp).collect();
    let neg = (0..3).map(|j| kp(j * 5)).collect();
    KeypointSet::new(pos, neg)
}

/// The whole training objective (part prediction, identity and triplet
/// terms) through the full network in f64, with respect to every parameter.
/// Also returns the number of visible parts in the batch, which must be
/// nonzero for the identity and triplet terms to carry gradient.
pub fn end_to_end_grad_error() -> ((f64, String), usize) {
    let cfg = tiny_run_config();
    let mut r = rng(33);
    let (store, model, bank) = kpr::train::build_network(&cfg, 2, DType::F64).unwrap();
    let bank = bank.unwrap();
    randomise(&store, "model.encoder.prompt_embed", &mut r);
    let images: Vec<RgbImage> = (0..4).map(|_| random_image(&mut r, 16, 16)).collect();
    let prompts: Vec<KeypointSet> = (0..4).map(|_| random_prompt(&mut r, 16, 16)).collect();
    let labels = [0u32, 0, 1, 1];
    let targets: Vec<u32> = (0..4 * 16).map(|_| r.random_range(0..9)).collect();
    let items: Vec<_> = images.iter().zip(&prompts).map(|(i, p)| (i, Some(p))).collect();
    let input = model.prepare_input(&items).unwrap();
    let loss_cfg = cfg.loss_config();
    let visible = std::cell::Cell::new(0usize);
    let loss = || {
        let out = model.forward(&input, &mut ForwardCtx::train(5)).unwrap();
        visible.set(out.head.visible.iter().flatten().filter(|&&v| v).count());
        let l_pp = part_prediction_loss(&out.head.probs, &targets).unwrap();
        let (emb, vis) = (&out.head.embeddings, &out.head.visibility);
        let dist = part_distance_matrix(emb, vis, emb, vis, 2.0).unwrap();
        let (l_tri, _, _) = batch_hard_triplet(&dist, &labels, loss_cfg.margin).unwrap();
        let (logits, mask) = bank.forward(emb, vis).unwrap();
        let l_id = identity_loss(&logits, &mask, &labels, loss_cfg.smoothing_eps).unwrap();
        total_loss(&loss_cfg, &l_id, &l_tri, &l_pp).unwrap()
    };
    let err = grad_check(&store.trainable(), &loss, 6);
    (err, visible.get())
}

// ---------------------------------------------------------------- model-level

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 16,
        embed_dim: 8,
        encoder: EncoderConfig {
            in_dim: 8,
            out_dim: 16,
            stages: vec![
                StageConfig { depth: 2, heads: 2, window: 4 },
                StageConfig { depth: 1, heads: 2, window: 2 },
            ],
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Largest `|sum_c p(c) - 1|` over every token of a batch of random images.
pub fn attention_row_deviation(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (_store, model) = KprModel::build(&tiny_model_config(), DType::F32).unwrap();
    let images: Vec<RgbImage> = (0..6).map(|_| random_image(&mut r, 32, 16)).collect();
    let prompts: Vec<KeypointSet> = (0..6).map(|_| random_prompt(&mut r, 32, 16)).collect();
    let items: Vec<_> = images.iter().zip(&prompts).map(|(i, p)| (i, Some(p))).collect();
    let d = model.describe(&items, 3, true).unwrap();
    d.iter()
        .flat_map(|d| {
            let a = d.attention.as_ref().unwrap();
            a.probs.chunks(a.classes).map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Replaces the features of invisible parts with garbage and checks that the
/// scalar and batched distances do not change by a single bit.
pub fn invisible_parts_are_inert(seed: u64) -> bool {
    let mut r = rng(seed);
    let (parts, dim, n) = (5, 4, 6);
    let descs: Vec<PartDescriptor> = (0..n).map(|_| random_descriptor(&mut r, parts, dim)).collect();
    let mut garbled = descs.clone();
    for d in &mut garbled {
        for (p, f) in d.f.iter_mut().enumerate() {
            if !d.v[p] {
                f.iter_mut().for_each(|x| *x = r.random_range(-1e3..1e3));
            }
        }
    }
    let scalar = |ds: &[PartDescriptor]| -> Vec<u64> {
        ds.iter()
            .flat_map(|a| ds.iter().map(move |b| kpr::losses::part_distance(a, b, 2.0).unwrap().value.to_bits()))
            .collect()
    };
    let batched = |ds: &[PartDescriptor]| -> Vec<u64> {
        let emb: Vec<f64> = ds.iter().flat_map(|d| d.f.iter().flatten().map(|&x| x as f64)).collect();
        let vis: Vec<f64> = ds.iter().flat_map(|d| d.v.iter().map(|&v| v as u8 as f64)).collect();
        let e = Tensor::from_vec(emb, (n, parts, dim), &Device::Cpu).unwrap();
        let v = Tensor::from_vec(vis, (n, parts), &Device::Cpu).unwrap();
        values(&part_distance_matrix(&e, &v, &e, &v, 2.0).unwrap()).iter().map(|x| x.to_bits()).collect()
    };
    scalar(&descs) == scalar(&garbled) && batched(&descs) == batched(&garbled)
}

/// Forward with and without a prompt on a freshly initialised model compares
/// bitwise equal in features, part probabilities and embeddings.
pub fn zero_init_prompt_identity(seed: u64) -> bool {
    let mut r = rng(seed);
    let (_store, model) = KprModel::build(&tiny_model_config(), DType::F32).unwrap();
    let images: Vec<RgbImage> = (0..4).map(|_| random_image(&mut r, 32, 16)).collect();
    let prompts: Vec<KeypointSet> = (0..4).map(|_| random_prompt(&mut r, 32, 16)).collect();
    let with: Vec<_> = images.iter().zip(&prompts).map(|(i, p)| (i, Some(p))).collect();
    let without: Vec<_> = images.iter().map(|i| (i, None)).collect();
    let run = |items: &[(&RgbImage, Option<&KeypointSet>)]| {
        let input = model.prepare_input(items).unwrap();
        let prompted = input.prompts.is_some();
        let out = model.forward(&input, &mut ForwardCtx::eval()).unwrap();
        let bits = |t: &Tensor| values(t).into_iter().map(f64::to_bits).collect::<Vec<_>>();
        (prompted, bits(&out.features), bits(&out.head.probs), bits(&out.head.embeddings))
    };
    let (a, b) = (run(&with), run(&without));
    a.0 && !b.0 && a.1 == b.1 && a.2 == b.2 && a.3 == b.3
}

/// Two short training runs with the same seed end with bitwise identical
/// parameters and loss traces.
pub fn training_is_bitwise_reproducible(train: &[Sample]) -> bool {
    let cfg = RunConfig {
        epochs: 2,
        steps_per_epoch: 2,
        pretrain_epochs: 1,
        freeze_prompt_epochs: 1,
        drop_path: 0.1,
        seed: 17,
        ..RunConfig::default()
    };
    let a = kpr::train::train(&cfg, train, None).unwrap();
    let b = kpr::train::train(&cfg, train, None).unwrap();
    let losses = |o: &kpr::train::TrainOutcome| o.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    let params = |o: &kpr::train::TrainOutcome| {
        o.store.params().into_iter().flat_map(|(_, p)| values(p.var.as_tensor())).map(f64::to_bits).collect::<Vec<_>>()
    };
    losses(&a) == losses(&b) && params(&a) == params(&b)
}

/// Each loss on its own, with respect to its direct input: part prediction
/// through the softmax, the triplet term through the part distance, and the
/// label-smoothed identity term.
pub fn isolated_loss_grad_error() -> (f64, String) {
    let mut r = rng(8);
    let logits = Var::from_tensor(&normal_tensor(&mut r, &[6, 9], 1.0)).unwrap();
    let targets: Vec<u32> = (0..6).map(|_| r.random_range(0..9)).collect();
    let pp = || part_prediction_loss(&kpr::model::encoder::softmax_last(logits.as_tensor()).unwrap(), &targets).unwrap();

    let emb = Var::from_tensor(&normal_tensor(&mut r, &[6, 3, 4], 1.0)).unwrap();
    let vis = Tensor::new(&[[1.0f64, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 1.0]], &Device::Cpu).unwrap();
    let labels = [0u32, 0, 1, 1, 2, 2];
    let tri = || {
        let d = part_distance_matrix(emb.as_tensor(), &vis, emb.as_tensor(), &vis, 2.0).unwrap();
        batch_hard_triplet(&d, &labels, 1.0).unwrap().0
    };

    let heads: Vec<Var> = (0..4).map(|_| Var::from_tensor(&normal_tensor(&mut r, &[6, 3], 1.0)).unwrap()).collect();
    let mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 1.0, 1.0], [0.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]], &Device::Cpu).unwrap();
    let id = || {
        let l: Vec<Tensor> = heads.iter().map(|h| h.as_tensor().clone()).collect();
        identity_loss(&l, &mask, &labels, 0.1).unwrap()
    };

    let checks = [
        grad_check(&[("part_prediction".into(), logits.clone())], &pp, 54),
        grad_check(&[("triplet".into(), emb.clone())], &tri, 72),
        grad_check(&heads.iter().enumerate().map(|(i, h)| (format!("identity head {i}"), h.clone())).collect::<Vec<_>>(), &id, 18),
    ];
    checks.into_iter().fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}

// ---------------------------------------------------------------- tracking

fn lb(id: u32, x: f32, y: f32, w: f32, h: f32) -> kpr::tracker::LabeledBox {
    kpr::tracker::LabeledBox { id, bbox: kpr::tracker::BBox { x, y, w, h } }
}

/// Two frames, two objects. Object A keeps tracker id 1 throughout. Object B
/// is id 2 in frame 0 and id 3 in frame 1, and id 3's box only half-overlaps.
///
/// For thresholds alpha <= 0.5 (10 of 19): TP=4, FN=FP=0, so DetA=1. Pairs:
/// (A,1) 2 matches, |A|=2, |1|=2 -> A=1; (B,2) 1 match, |B|=2, |2|=1 -> 0.5;
/// (B,3) likewise 0.5. AssA = (2*1 + 1*0.5 + 1*0.5)/4 = 0.75, HOTA = sqrt(0.75).
/// For alpha > 0.5 (9 of 19): TP=3, FN=FP=1, DetA=3/5. Pairs (A,1) -> 1 and
/// (B,2) -> 0.5; AssA = (2 + 0.5)/3, HOTA = sqrt(0.6 * 2.5/3) = sqrt(0.5).
///
/// Returns the largest deviation over HOTA, DetA and AssA, and the switch count.
pub fn hota_toy_case() -> (f64, usize) {
    let gt = vec![
        vec![lb(10, 0.0, 0.0, 10.0, 10.0), lb(20, 50.0, 0.0, 10.0, 10.0)],
        vec![lb(10, 0.0, 0.0, 10.0, 10.0), lb(20, 50.0, 0.0, 10.0, 10.0)],
    ];
    let pr = vec![
        vec![lb(1, 0.0, 0.0, 10.0, 10.0), lb(2, 50.0, 0.0, 10.0, 10.0)],
        vec![lb(1, 0.0, 0.0, 10.0, 10.0), lb(3, 50.0, 0.0, 10.0, 5.0)],
    ];
    assert_eq!(kpr::tracker::metrics::iou(&gt[1][1].bbox, &pr[1][1].bbox), 0.5);
    let m = kpr::tracker::tracking_metrics(&pr, &gt).unwrap();
    let hota = (10.0 * 0.75f64.sqrt() + 9.0 * 0.5f64.sqrt()) / 19.0;
    let det = (10.0 * 1.0 + 9.0 * 0.6) / 19.0;
    let ass = (10.0 * 0.75 + 9.0 * (2.5 / 3.0)) / 19.0;
    let err = (m.hota - hota).abs().max((m.det_a - det).abs()).max((m.ass_a - ass).abs());
    (err, m.id_switches)
}
