//! Training loop: PK batches, crop/pad -> erasing -> BIPO, the joint objective,
//! SGD with momentum under a warmup + cosine schedule, and checkpointing.
//! Also dataset-level evaluation and the ablation runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{bipo_with_rng, random_crop_pad, random_erasing};
use crate::checkpoint::{self, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::datamodel::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    batch_hard_triplet, identity_loss, part_distance_matrix, part_prediction_loss, total_loss,
    ClassifierBank,
};
use crate::model::nn::ParamStore;
use crate::model::{part_prediction_targets, ForwardCtx, KprModel, PromptMode};
use crate::retrieval::{embed_queries, evaluate, EvalReport, GalleryIndex};

/// Parameter-name prefix of the prompt tokenizer, frozen during warmup.
pub const PROMPT_TOKENIZER: &str = "model.encoder.prompt_embed";

/// Builds the model (and an identity classifier bank when `num_ids > 0`) in
/// one store seeded by the run seed.
pub fn build_network(
    cfg: &RunConfig,
    num_ids: usize,
    dtype: DType,
) -> Result<(ParamStore, KprModel, Option<ClassifierBank>)> {
    let mcfg = cfg.model_config();
    let store = ParamStore::new(dtype, cfg.seed);
    let model = KprModel::new(&store.root().pp("model"), &mcfg)?;
    let bank = if num_ids > 0 {
        Some(ClassifierBank::new(
            &store.root().pp("id_heads"),
            model.num_embeddings(),
            mcfg.embed_dim,
            num_ids,
        )?)
    } else {
        None
    };
    Ok((store, model, bank))
}

/// P identities x A instances per batch.
pub struct PkSampler {
    by_id: BTreeMap<u32, Vec<usize>>,
    ids: Vec<u32>,
    p: usize,
    a: usize,
}

impl PkSampler {
    pub fn new(samples: &[Sample], p: usize, a: usize) -> Result<Self> {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_id.entry(s.identity).or_default().push(i);
        }
        if by_id.len() < p {
            return Err(Error::Config(format!(
                "{} training identities, batches need {p}",
                by_id.len()
            )));
        }
        let ids = by_id.keys().copied().collect();
        Ok(PkSampler { by_id, ids, p, a })
    }

    /// Sample indices grouped by identity; instances are drawn without
    /// replacement unless an identity has fewer than A images.
    pub fn batch<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let ids: Vec<u32> = self.ids.choose_multiple(rng, self.p).copied().collect();
        let mut out = Vec::with_capacity(self.p * self.a);
        for id in ids {
            let pool = &self.by_id[&id];
            if pool.len() >= self.a {
                out.extend(pool.choose_multiple(rng, self.a).copied());
            } else {
                out.extend((0..self.a).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        out
    }
}

/// Linear warmup then cosine decay to zero.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Stochastic gradient descent with momentum and L2 weight decay.
/// Gradients are rescaled to a global norm of at most `clip` when `clip > 0`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    clip: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip: f64) -> Self {
        Sgd { momentum, weight_decay, clip, velocity: BTreeMap::new() }
    }

    /// Updates every trainable parameter that received a gradient, except
    /// those whose name starts with one of `frozen`. Returns the gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, frozen: &[&str]) -> Result<f64> {
        let params: Vec<_> = store
            .trainable()
            .into_iter()
            .filter(|(name, _)| !frozen.iter().any(|f| name.starts_with(f)))
            .filter_map(|(name, var)| grads.get(var.as_tensor()).cloned().map(|g| (name, var, g)))
            .collect();
        let mut sq = 0.0;
        for (_, _, g) in &params {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let norm = sq.sqrt();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        for (name, var, g) in params {
            let g = ((g * scale)? + (var.as_tensor() * self.weight_decay)?)?;
            let v = match self.velocity.get(&name) {
                Some(v) => ((v * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            self.velocity.insert(name, v);
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_pp")]
    pub l_pp: f64,
    #[serde(rename = "L_id")]
    pub l_id: f64,
    #[serde(rename = "L_tri")]
    pub l_tri: f64,
    /// Fraction of part embeddings marked visible in the batch.
    pub visible: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub model: KprModel,
    pub bank: ClassifierBank,
    pub log: Vec<StepLog>,
    pub epoch_means: Vec<f64>,
    pub num_identities: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Applies crop/pad and erasing per sample, then BIPO against the batch.
pub fn augment_batch<R: Rng>(cfg: &RunConfig, batch: &[Sample], rng: &mut R) -> Vec<Sample> {
    let stage1: Vec<Sample> = batch
        .iter()
        .map(|s| {
            let s = random_crop_pad(s, cfg.crop_pad, rng);
            random_erasing(&s, cfg.erase_p, rng)
        })
        .collect();
    stage1
        .iter()
        .map(|s| bipo_with_rng(s, &stage1, cfg.bipo_p, rng).sample)
        .collect()
}

/// Trains on `train`; writes the step log, periodic checkpoints and the final
/// checkpoint under `out_dir` when given.
pub fn train(cfg: &RunConfig, train: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let id_map: BTreeMap<u32, u32> = train
        .iter()
        .map(|s| s.identity)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i as u32))
        .collect();
    let num_ids = id_map.len();
    let (store, model, bank) = build_network(cfg, num_ids, DType::F32)?;
    let bank = bank.expect("num_ids > 0");
    let sampler = PkSampler::new(train, cfg.ids_per_batch, cfg.instances_per_id)?;
    let batch_len = cfg.ids_per_batch * cfg.instances_per_id;
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        train.len().div_ceil(batch_len)
    };
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let loss_cfg = cfg.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.grad_clip);
    let mut log = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let frozen: &[&str] = if epoch < cfg.freeze_prompt_epochs { &[PROMPT_TOKENIZER] } else { &[] };
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = sampler.batch(&mut rng);
            let raw: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = augment_batch(cfg, &raw, &mut rng);
            let labels: Vec<u32> = batch.iter().map(|s| id_map[&s.identity]).collect();
            let items: Vec<_> = batch.iter().map(|s| (&s.image, Some(&s.keypoints))).collect();
            let input = model.prepare_input(&items)?;
            let mut ctx = ForwardCtx::train(rng.random());
            let out = model.forward(&input, &mut ctx)?;

            let cell = cfg.height / out.grid.0;
            let mut targets = Vec::with_capacity(batch.len() * out.grid.0 * out.grid.1);
            for s in &batch {
                targets.extend(part_prediction_targets(&s.parsing, cfg.num_parts, cell)?);
            }
            let l_pp = part_prediction_loss(&out.head.probs, &targets)?;
            let emb = &out.head.embeddings;
            let vis = &out.head.visibility;
            let dist = part_distance_matrix(emb, vis, emb, vis, loss_cfg.no_overlap_distance)?;
            let (l_tri, _, _) = batch_hard_triplet(&dist, &labels, loss_cfg.margin)?;
            let (logits, mask) = bank.forward(emb, vis)?;
            let l_id = identity_loss(&logits, &mask, &labels, loss_cfg.smoothing_eps)?;
            let loss = if epoch < cfg.pretrain_epochs {
                l_pp.clone()
            } else {
                total_loss(&loss_cfg, &l_id, &l_tri, &l_pp)?
            };

            let rec = StepLog {
                epoch,
                step,
                lr: learning_rate(cfg.lr, step, warmup, total),
                loss: scalar(&loss)?,
                l_pp: scalar(&l_pp)?,
                l_id: scalar(&l_id)?,
                l_tri: scalar(&l_tri)?,
                visible: scalar(&vis.mean_all()?)?,
                grad_norm: f64::NAN,
            };
            if !rec.loss.is_finite() {
                let detail = serde_json::json!({
                    "record": rec,
                    "batch": batch.iter().map(|s| &s.id).collect::<Vec<_>>(),
                });
                if let Some(dir) = out_dir {
                    let p = dir.join("nan_dump.json");
                    std::fs::write(&p, serde_json::to_string_pretty(&detail)?).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::NonFiniteLoss { epoch, step, detail: detail.to_string() });
            }
            let grads = loss.backward()?;
            let mut rec = rec;
            rec.grad_norm = sgd.step(&store, &grads, rec.lr, frozen)?;
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
            }
            log::debug!("{}", serde_json::to_string(&rec)?);
            sum += rec.loss;
            log.push(rec);
            step += 1;
        }
        epoch_means.push(sum / steps_per_epoch as f64);
        log::info!("epoch {epoch}: mean loss {:.4}", epoch_means[epoch]);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let meta = checkpoint_meta(cfg, num_ids, epoch + 1, &rng)?;
                checkpoint::save(&store, &meta, dir.join(format!("checkpoint_epoch{}.safetensors", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let meta = checkpoint_meta(cfg, num_ids, cfg.epochs, &rng)?;
        checkpoint::save(&store, &meta, dir.join("checkpoint.safetensors"))?;
    }
    Ok(TrainOutcome { store, model, bank, log, epoch_means, num_identities: num_ids })
}

fn checkpoint_meta(cfg: &RunConfig, num_ids: usize, epoch: usize, rng: &ChaCha8Rng) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        num_identities: num_ids,
        epoch,
        rng_state: Some(serde_json::to_string(rng)?),
    })
}

/// Prompted queries against a prompted gallery index.
pub fn evaluate_split(model: &KprModel, data: &DatasetSplit, batch_size: usize) -> Result<EvalReport> {
    let index = GalleryIndex::build(model, &data.gallery, batch_size)?;
    let prompts: Vec<_> = data.query.iter().map(|s| s.keypoints.clone()).collect();
    let queries = embed_queries(model, &data.query, Some(&prompts), batch_size)?;
    evaluate(&queries, &index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Pbh,
    Msf,
    PosPrompt,
    NegPrompt,
    Bipo,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pbh" => Ok(Axis::Pbh),
            "msf" => Ok(Axis::Msf),
            "pos_prompt" => Ok(Axis::PosPrompt),
            "neg_prompt" => Ok(Axis::NegPrompt),
            "bipo" => Ok(Axis::Bipo),
            other => Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected pbh, msf, pos_prompt, neg_prompt, bipo)"
            ))),
        }
    }
}

impl Axis {
    /// Turns this component off in `cfg`.
    pub fn disable(self, cfg: &mut RunConfig) {
        match self {
            Axis::Pbh => cfg.part_based = false,
            Axis::Msf => cfg.msf = false,
            Axis::PosPrompt => cfg.prompts = PromptMode::Off,
            Axis::NegPrompt => {
                if cfg.prompts == PromptMode::Full {
                    cfg.prompts = PromptMode::PositiveOnly;
                }
            }
            Axis::Bipo => cfg.bipo_p = 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub part_based: bool,
    pub msf: bool,
    pub prompts: PromptMode,
    pub bipo: bool,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub multi_person_rank1: f64,
}

/// The full model, then one row per axis with that component removed.
pub fn ablate(cfg: &RunConfig, axes: &[Axis], data: &DatasetSplit) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), cfg.clone())];
    for &axis in axes {
        let mut c = cfg.clone();
        axis.disable(&mut c);
        variants.push((format!("no_{}", serde_json::to_value(axis)?.as_str().unwrap_or("?")), c));
    }
    variants
        .into_iter()
        .map(|(label, c)| {
            let out = train(&c, &data.train, None)?;
            let r = evaluate_split(&out.model, data, c.batch_size)?;
            Ok(AblationRow {
                label,
                part_based: c.part_based,
                msf: c.msf,
                prompts: c.prompts,
                bipo: c.bipo_p > 0.0,
                rank1: r.rank1,
                map: r.map,
                multi_person_rank1: r.multi_person.rank1,
            })
        })
        .collect()
}
