//! Training objective: token-wise part prediction, label-smoothed identity
//! classification on visible parts, and batch-hard triplet on the
//! visibility-averaged part distance. Also the descriptor-level distance used
//! at inference.

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::{Linear, Scope};
use crate::model::PartDescriptor;

/// Distance assigned to pairs without a mutually visible part.
pub const NO_OVERLAP_DISTANCE: f64 = 2.0;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_pp: f64,
    pub margin: f64,
    pub smoothing_eps: f64,
    pub id_weight: f64,
    pub triplet_weight: f64,
    pub no_overlap_distance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pp: 0.3,
            margin: 0.3,
            smoothing_eps: 0.1,
            id_weight: 1.0,
            triplet_weight: 1.0,
            no_overlap_distance: NO_OVERLAP_DISTANCE,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pp < 0.0 || self.margin < 0.0 || !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::Config(format!(
                "invalid loss config: lambda_pp={}, margin={}, eps={}",
                self.lambda_pp, self.margin, self.smoothing_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartDistance {
    pub value: f64,
    /// No part was visible in both descriptors; `value` is the fallback.
    pub no_overlap: bool,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine distance of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Mean cosine distance over the parts visible in both descriptors.
pub fn part_distance(a: &PartDescriptor, b: &PartDescriptor, fallback: f64) -> Result<PartDistance> {
    if a.num_parts() != b.num_parts() || a.v.len() != a.num_parts() || b.v.len() != b.num_parts() {
        return Err(Error::Shape(format!(
            "descriptor part counts differ: {} vs {}",
            a.num_parts(),
            b.num_parts()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.num_parts() {
        if a.v[i] && b.v[i] {
            if a.f[i].len() != b.f[i].len() {
                return Err(Error::Shape("descriptor embedding widths differ".into()));
            }
            sum += cosine_distance(&a.f[i], &b.f[i])?;
            n += 1;
        }
    }
    Ok(if n == 0 {
        PartDistance { value: fallback, no_overlap: true }
    } else {
        PartDistance { value: sum / n as f64, no_overlap: false }
    })
}

/// Mean over tokens of `-log p(target)`, with probabilities floored at 1e-12.
/// `probs` is `(..., K+1)`; `targets` lists one label per token in order.
pub fn part_prediction_loss(probs: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let classes = *probs.dims().last().ok_or_else(|| Error::Shape("scalar probs".into()))?;
    let rows = probs.elem_count() / classes;
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} tokens", targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::Invalid(format!("part label {bad} outside [0,{}]", classes - 1)));
    }
    let idx = Tensor::from_slice(targets, (rows, 1), probs.device())?;
    let p = probs.reshape((rows, classes))?.gather(&idx, 1)?;
    let nll = p.clamp(PROB_FLOOR, f64::MAX)?.log()?.neg()?;
    Ok(nll.mean_all()?)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.clamp(1e-16, f64::MAX)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Pairwise part distances `(A, B)` between embeddings `(A, P, d)` and
/// `(B, P, d)` with 0/1 visibilities `(A, P)` and `(B, P)`.
pub fn part_distance_matrix(
    a: &Tensor,
    va: &Tensor,
    b: &Tensor,
    vb: &Tensor,
    fallback: f64,
) -> Result<Tensor> {
    let an = unit_rows(a)?.permute((1, 0, 2))?.contiguous()?; // P A d
    let bn = unit_rows(b)?.permute((1, 2, 0))?.contiguous()?; // P d B
    let cos = an.matmul(&bn)?; // P A B
    let m = va.t()?.unsqueeze(2)?.broadcast_mul(&vb.t()?.unsqueeze(1)?)?;
    let num = ((1.0 - cos)? * &m)?.sum(0)?;
    let den = m.sum(0)?;
    let empty = den.eq(0.0)?.to_dtype(a.dtype())?;
    Ok((num.broadcast_div(&den.clamp(1.0, f64::MAX)?)? + (empty * fallback)?)?)
}

/// Hardest positive / hardest negative per anchor, selected on detached
/// distances; returns `(loss, positive index, negative index)` per anchor.
pub fn batch_hard_triplet(dist: &Tensor, labels: &[u32], margin: f64) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if dist.dims() != [n, n] {
        return Err(Error::Shape(format!("distance matrix {:?} for {n} labels", dist.dims())));
    }
    let d: Vec<Vec<f64>> = dist.detach().to_dtype(DType::F64)?.to_vec2()?;
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let p = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .max_by(|&x, &y| d[a][x].total_cmp(&d[a][y]).then(y.cmp(&x)))
            .ok_or_else(|| Error::Invalid(format!("identity {} has a single instance in the batch", labels[a])))?;
        let q = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .min_by(|&x, &y| d[a][x].total_cmp(&d[a][y]).then(x.cmp(&y)))
            .ok_or_else(|| Error::Invalid("batch holds a single identity".into()))?;
        pos.push(p);
        neg.push(q);
    }
    let mut sel_p = vec![0f32; n * n];
    let mut sel_n = vec![0f32; n * n];
    for a in 0..n {
        sel_p[a * n + pos[a]] = 1.0;
        sel_n[a * n + neg[a]] = 1.0;
    }
    let dev = dist.device();
    let sp = Tensor::from_vec(sel_p, (n, n), dev)?.to_dtype(dist.dtype())?;
    let sn = Tensor::from_vec(sel_n, (n, n), dev)?.to_dtype(dist.dtype())?;
    let dp = (dist * sp)?.sum(1)?;
    let dn = (dist * sn)?.sum(1)?;
    let loss = ((dp - dn)? + margin)?.relu()?.mean_all()?;
    Ok((loss, pos, neg))
}

/// Label-smoothed cross-entropy per row: logits `(B, C)` -> `(B,)`.
pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[u32], eps: f64) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Invalid(format!("identity label {bad} outside {c} classes")));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let mut q = vec![eps / c as f64; b * c];
    for (i, &l) in labels.iter().enumerate() {
        q[i * c + l as usize] += 1.0 - eps;
    }
    let q = Tensor::from_vec(q, (b, c), logits.device())?.to_dtype(logits.dtype())?;
    Ok((logp * q)?.sum(1)?.neg()?)
}

/// Identity loss over classifier heads: `logits[h]` is `(B, C)`, `mask` is
/// `(B, H)` 0/1. Each sample averages over its visible heads; samples with no
/// visible head are left out of the mean over samples.
pub fn identity_loss(logits: &[Tensor], mask: &Tensor, labels: &[u32], eps: f64) -> Result<Tensor> {
    let (b, h) = mask.dims2()?;
    if h != logits.len() || b != labels.len() {
        return Err(Error::Shape(format!(
            "{} heads / {} labels for a ({b},{h}) mask",
            logits.len(),
            labels.len()
        )));
    }
    let per_head = logits
        .iter()
        .map(|l| smoothed_cross_entropy(l, labels, eps))
        .collect::<Result<Vec<_>>>()?;
    let losses = Tensor::stack(&per_head, 1)?; // B H
    let count = mask.sum(1)?; // B
    let per_sample = (losses * mask)?.sum(1)?.broadcast_div(&count.clamp(1.0, f64::MAX)?)?;
    let used = count.gt(0.0)?.to_dtype(mask.dtype())?;
    let n_used = used.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(((per_sample * used)?.sum_all()? / n_used.max(1.0))?)
}

/// Weighted objective from already-computed components.
pub fn total_loss(cfg: &LossConfig, l_id: &Tensor, l_tri: &Tensor, l_pp: &Tensor) -> Result<Tensor> {
    let reid = ((l_id * cfg.id_weight)? + (l_tri * cfg.triplet_weight)?)?;
    if cfg.lambda_pp == 0.0 {
        return Ok(reid);
    }
    Ok((reid + (l_pp * cfg.lambda_pp)?)?)
}

/// One identity classifier per part embedding plus one over the concatenation
/// of visible part embeddings.
pub struct ClassifierBank {
    parts: Vec<Linear>,
    summary: Linear,
}

impl ClassifierBank {
    pub fn new(scope: &Scope, num_embeddings: usize, dim: usize, num_ids: usize) -> Result<Self> {
        let parts = (0..num_embeddings)
            .map(|i| Linear::new(&scope.pp(format!("part{i}")), dim, num_ids, true))
            .collect::<Result<Vec<_>>>()?;
        let summary = Linear::new(&scope.pp("summary"), num_embeddings * dim, num_ids, true)?;
        Ok(ClassifierBank { parts, summary })
    }

    /// Embeddings `(B, P, d)` and visibility `(B, P)` -> per-head logits and
    /// the `(B, P+1)` head mask.
    pub fn forward(&self, emb: &Tensor, vis: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let (b, p, d) = emb.dims3()?;
        let mut logits = Vec::with_capacity(p + 1);
        for (i, head) in self.parts.iter().enumerate() {
            logits.push(head.forward(&emb.narrow(1, i, 1)?.squeeze(1)?)?);
        }
        let masked = emb.broadcast_mul(&vis.unsqueeze(2)?)?.reshape((b, p * d))?;
        logits.push(self.summary.forward(&masked)?);
        let any = vis.max_keepdim(1)?;
        let mask = Tensor::cat(&[vis.clone(), any], 1)?;
        Ok((logits, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn desc(f: Vec<Vec<f32>>, v: Vec<bool>) -> PartDescriptor {
        PartDescriptor { f, v, attention: None }
    }

    #[test]
    fn distance_averages_mutual_parts() {
        // cos distances 0.4 and 0.8 built from unit vectors at known angles.
        let unit = |c: f32| vec![c, (1.0 - c * c).sqrt()];
        let a = desc(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![true, true]);
        let b = desc(vec![unit(0.6), unit(0.2)], vec![true, true]);
        let d = part_distance(&a, &b, 2.0).unwrap();
        assert!((d.value - 0.6).abs() < 1e-7, "{}", d.value);
        assert!(!d.no_overlap);
    }

    #[test]
    fn distance_uses_only_mutual_visibility() {
        let a = desc(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![true, true, false]);
        let b = desc(vec![vec![0.0, 1.0], vec![5.0, 1.0], vec![1.0, 0.0]], vec![true, false, true]);
        assert_eq!(part_distance(&a, &b, 2.0).unwrap().value, 1.0);
        let none = desc(vec![vec![1.0, 0.0]; 3], vec![false; 3]);
        let d = part_distance(&a, &none, 2.0).unwrap();
        assert_eq!((d.value, d.no_overlap), (2.0, true));
    }

    #[test]
    fn zero_norm_is_an_error() {
        let a = desc(vec![vec![0.0, 0.0]], vec![true]);
        let b = desc(vec![vec![1.0, 0.0]], vec![true]);
        assert!(part_distance(&a, &b, 2.0).is_err());
    }

    #[test]
    fn uniform_attention_costs_ln_k_plus_one() {
        let probs = Tensor::full(1.0f64 / 9.0, (4, 9), &Device::Cpu).unwrap();
        let l = part_prediction_loss(&probs, &[0, 3, 8, 2]).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 9f64.ln()).abs() < 1e-12);
        assert!(part_prediction_loss(&probs, &[0, 3, 9, 2]).is_err());
    }

    #[test]
    fn one_hot_attention_costs_nothing() {
        let mut p = vec![0f64; 3 * 9];
        for (i, t) in [1usize, 0, 8].iter().enumerate() {
            p[i * 9 + t] = 1.0;
        }
        let probs = Tensor::from_vec(p, (3, 9), &Device::Cpu).unwrap();
        let l = part_prediction_loss(&probs, &[1, 0, 8]).unwrap().to_scalar::<f64>().unwrap();
        assert!(l <= 1e-6);
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let emb = Tensor::ones((4, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let vis = Tensor::ones((4, 2), DType::F64, &Device::Cpu).unwrap();
        let d = part_distance_matrix(&emb, &vis, &emb, &vis, 2.0).unwrap();
        let (l, _, _) = batch_hard_triplet(&d, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_needs_two_instances() {
        let d = Tensor::zeros((3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(batch_hard_triplet(&d, &[0, 0, 1], 0.3).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let cfg = LossConfig::default();
        let l = total_loss(&cfg, &t(1.0), &t(2.0), &t(3.0)).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 3.9).abs() < 1e-12);
        let zero = LossConfig { lambda_pp: 0.0, ..cfg };
        let l = total_loss(&zero, &t(1.0), &t(2.0), &t(f64::NAN)).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 3.0);
    }

    #[test]
    fn invisible_sample_is_left_out() {
        let logits = Tensor::new(&[[5.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64], [0.0]], &Device::Cpu).unwrap();
        let l = identity_loss(&[logits.clone()], &mask, &[0, 1], 0.0).unwrap();
        let only = identity_loss(&[logits.narrow(0, 0, 1).unwrap()], &mask.narrow(0, 0, 1).unwrap(), &[0], 0.0).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), only.to_scalar::<f64>().unwrap());
    }

    #[test]
    fn smoothed_ce_matches_definition() {
        let z = [1.0f64, -0.5, 2.0];
        let logits = Tensor::new(&[z], &Device::Cpu).unwrap();
        let got = smoothed_cross_entropy(&logits, &[2], 0.1).unwrap().to_vec1::<f64>().unwrap()[0];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let q = [0.1 / 3.0, 0.1 / 3.0, 0.9 + 0.1 / 3.0];
        let expect: f64 = -(0..3).map(|i| q[i] * (z[i] - lse)).sum::<f64>();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn masked_part_perturbation_is_invisible() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[[1.0f64, 2.0], [3.0, -1.0]], [[0.5, 0.1], [9.0, 9.0]]], &dev).unwrap();
        let va = Tensor::new(&[[1.0f64, 1.0], [1.0, 0.0]], &dev).unwrap();
        let d1: Vec<Vec<f64>> = part_distance_matrix(&a, &va, &a, &va, 2.0).unwrap().to_vec2().unwrap();
        let a2 = Tensor::new(&[[[1.0f64, 2.0], [3.0, -1.0]], [[0.5, 0.1], [-4.0, 7.0]]], &dev).unwrap();
        let d2: Vec<Vec<f64>> = part_distance_matrix(&a2, &va, &a2, &va, 2.0).unwrap().to_vec2().unwrap();
        assert_eq!(d1, d2);
    }

    /// Central-difference gradient check of a scalar function of one variable.
    pub(crate) fn grad_check(x0: &Tensor, f: impl Fn(&Tensor) -> Tensor, tol: f64) {
        let var = Var::from_tensor(x0).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            let eval = |v: Vec<f64>| {
                f(&Tensor::from_vec(v, x0.dims(), x0.device()).unwrap()).to_scalar::<f64>().unwrap()
            };
            let num = (eval(up) - eval(dn)) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < tol, "element {i}: numeric {num}, analytic {}", g[i]);
        }
    }

    #[test]
    fn part_prediction_gradient() {
        let logits = Tensor::new(&[[0.3f64, -1.0, 0.5], [1.2, 0.1, -0.4], [0.0, 0.7, 0.2], [-0.3, -0.2, 0.9]], &Device::Cpu).unwrap();
        grad_check(
            &logits,
            |z| part_prediction_loss(&crate::model::encoder::softmax_last(z).unwrap(), &[2, 0, 1, 1]).unwrap(),
            1e-4,
        );
    }

    #[test]
    fn distance_and_triplet_gradient() {
        let emb = Tensor::new(
            &[
                [[0.3f64, 1.0, 0.2], [0.5, -0.2, 0.9]],
                [[0.1, 0.8, 0.4], [0.7, 0.1, 0.3]],
                [[-0.6, 0.2, 0.5], [0.2, 0.9, -0.1]],
                [[-0.4, 0.5, 0.1], [0.1, 0.6, 0.6]],
            ],
            &Device::Cpu,
        )
        .unwrap();
        let vis = Tensor::new(&[[1.0f64, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        grad_check(
            &emb,
            |e| {
                let d = part_distance_matrix(e, &vis, e, &vis, 2.0).unwrap();
                batch_hard_triplet(&d, &[0, 0, 1, 1], 1.5).unwrap().0
            },
            1e-4,
        );
    }

    #[test]
    fn identity_loss_gradient() {
        let z = Tensor::new(&[[0.3f64, -1.0, 0.5], [1.2, 0.1, -0.4]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1.0f64, 0.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        grad_check(
            &z,
            |z| {
                let other = (z * 2.0).unwrap();
                identity_loss(&[z.clone(), other], &mask, &[2, 0], 0.1).unwrap()
            },
            1e-4,
        );
    }
}
