//! Gallery index, ranking by part distance, CMC / mAP evaluation and the
//! prompt-dropout sweep.

use std::collections::HashSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::error::{Error, Result};
use crate::geometry::{mpol, prompt_dropout};
use crate::losses::{part_distance, NO_OVERLAP_DISTANCE};
use crate::model::{KprModel, PartDescriptor};

pub const INDEX_MAGIC: &[u8; 8] = b"KPRINDEX";
pub const INDEX_VERSION: u32 = 1;
pub const INDEX_BIN: &str = "index.bin";
pub const INDEX_MANIFEST: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub identity: u32,
    pub source_id: String,
    #[serde(skip)]
    pub descriptor: PartDescriptor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GalleryIndex {
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub sample_id: String,
    pub identity: u32,
    pub distance: f64,
    pub no_overlap: bool,
}

impl GalleryIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut shape = None;
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample_id {} in index", e.sample_id)));
            }
            let s = (e.descriptor.num_parts(), e.descriptor.dim());
            if *shape.get_or_insert(s) != s {
                return Err(Error::Shape(format!(
                    "entry {} has descriptor shape {s:?}, index uses {:?}",
                    e.sample_id,
                    shape.unwrap()
                )));
            }
        }
        Ok(GalleryIndex { entries })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    /// `(K, d)` of the stored descriptors.
    pub fn shape(&self) -> (usize, usize) {
        self.entries
            .first()
            .map_or((0, 0), |e| (e.descriptor.num_parts(), e.descriptor.dim()))
    }

    /// Embeds `samples` with their prompts and indexes them.
    pub fn build(model: &KprModel, samples: &[Sample], batch_size: usize) -> Result<Self> {
        let items: Vec<_> = samples.iter().map(|s| (&s.image, Some(&s.keypoints))).collect();
        let desc = model.describe(&items, batch_size, false)?;
        GalleryIndex::new(
            samples
                .iter()
                .zip(desc)
                .map(|(s, d)| IndexEntry {
                    sample_id: s.id.clone(),
                    identity: s.identity,
                    source_id: s.source_id.clone(),
                    descriptor: d,
                })
                .collect(),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (k, d) = self.shape();
        let bin = dir.join(INDEX_BIN);
        let file = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&bin, e);
        w.write_all(INDEX_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64).map_err(io)?;
        w.write_u32::<LittleEndian>(k as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        for e in &self.entries {
            for (f, &v) in e.descriptor.f.iter().zip(&e.descriptor.v) {
                w.write_u8(v as u8).map_err(io)?;
                for &x in f {
                    w.write_f32::<LittleEndian>(x).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
        let manifest = Manifest {
            format_version: INDEX_VERSION,
            num_entries: self.entries.len(),
            num_parts: k,
            dim: d,
            entries: self.entries.clone(),
        };
        let path = dir.join(INDEX_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(INDEX_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        let bin = dir.join(INDEX_BIN);
        let file = fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(&bin, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Invalid(format!("{} is not an index file", bin.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != INDEX_VERSION || manifest.format_version != INDEX_VERSION {
            return Err(Error::Invalid(format!("unsupported index version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let k = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if n != manifest.entries.len() || (k, d) != (manifest.num_parts, manifest.dim) {
            return Err(Error::Invalid("index manifest and binary disagree".into()));
        }
        for e in manifest.entries.iter_mut() {
            let mut f = Vec::with_capacity(k);
            let mut v = Vec::with_capacity(k);
            for _ in 0..k {
                v.push(r.read_u8().map_err(io)? != 0);
                let mut row = vec![0f32; d];
                r.read_f32_into::<LittleEndian>(&mut row).map_err(io)?;
                f.push(row);
            }
            e.descriptor = PartDescriptor { f, v, attention: None };
        }
        GalleryIndex::new(manifest.entries)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_entries: usize,
    num_parts: usize,
    dim: usize,
    entries: Vec<IndexEntry>,
}

/// Gallery ordered by ascending part distance, ties by sample id.
pub fn rank_gallery(query: &PartDescriptor, index: &GalleryIndex) -> Result<Vec<Ranked>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut out = index
        .entries
        .iter()
        .map(|e| {
            let d = part_distance(query, &e.descriptor, NO_OVERLAP_DISTANCE)?;
            Ok(Ranked {
                sample_id: e.sample_id.clone(),
                identity: e.identity,
                distance: d.value,
                no_overlap: d.no_overlap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.sample_id.cmp(&b.sample_id)));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Query {
    pub sample_id: String,
    pub identity: u32,
    pub descriptor: PartDescriptor,
    /// Occlusion level used for bucketing, if known.
    pub mpol: Option<f64>,
    /// Query carries negative keypoints (another person is present).
    pub multi_person: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub sample_id: String,
    pub ap: f64,
    /// 1-based rank of the first correct match.
    pub first_hit: usize,
    pub mpol: Option<f64>,
    pub multi_person: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
    pub map: f64,
}

impl Metrics {
    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a QueryResult>) -> Metrics {
        let (mut n, mut r1, mut r3, mut r5, mut ap) = (0usize, 0usize, 0usize, 0usize, 0.0);
        for q in results {
            n += 1;
            r1 += (q.first_hit <= 1) as usize;
            r3 += (q.first_hit <= 3) as usize;
            r5 += (q.first_hit <= 5) as usize;
            ap += q.ap;
        }
        let div = n.max(1) as f64;
        Metrics {
            count: n,
            rank1: r1 as f64 / div,
            rank3: r3 as f64 / div,
            rank5: r5 as f64 / div,
            map: ap / div,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpolBucket {
    pub lo: f64,
    pub hi: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    /// Queries without any same-identity gallery entry, left out of the metrics.
    pub excluded_queries: Vec<String>,
    pub per_query: Vec<QueryResult>,
    pub multi_person: Metrics,
    pub mpol_buckets: Vec<MpolBucket>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Average precision of a ranked relevance list: mean of precision at every
/// relevant position. Also returns the 1-based first-hit rank.
pub fn average_precision(relevant: &[bool]) -> Option<(f64, usize)> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first = None;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
            first.get_or_insert(i + 1);
        }
    }
    first.map(|f| (sum / hits as f64, f))
}

pub const MPOL_BUCKETS: [(f64, f64); 3] = [(0.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0), (2.0 / 3.0, 1.0)];

/// Single-query evaluation against the whole gallery; a query's own sample
/// id is removed from its ranking.
pub fn evaluate(queries: &[Query], index: &GalleryIndex) -> Result<EvalReport> {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for q in queries {
        let ranking = rank_gallery(&q.descriptor, index)?;
        let relevant: Vec<bool> = ranking
            .iter()
            .filter(|r| r.sample_id != q.sample_id)
            .map(|r| r.identity == q.identity)
            .collect();
        match average_precision(&relevant) {
            Some((ap, first_hit)) => per_query.push(QueryResult {
                sample_id: q.sample_id.clone(),
                ap,
                first_hit,
                mpol: q.mpol,
                multi_person: q.multi_person,
            }),
            None => excluded.push(q.sample_id.clone()),
        }
    }
    let all = Metrics::from_results(&per_query);
    let multi_person = Metrics::from_results(per_query.iter().filter(|q| q.multi_person));
    let mpol_buckets = MPOL_BUCKETS
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| MpolBucket {
            lo,
            hi,
            metrics: Metrics::from_results(per_query.iter().filter(|q| {
                q.mpol.is_some_and(|m| m >= lo && (m < hi || (i == MPOL_BUCKETS.len() - 1 && m <= hi)))
            })),
        })
        .collect();
    Ok(EvalReport {
        rank1: all.rank1,
        rank3: all.rank3,
        rank5: all.rank5,
        map: all.map,
        num_queries: per_query.len(),
        excluded_queries: excluded,
        per_query,
        multi_person,
        mpol_buckets,
    })
}

/// Embeds query samples, optionally with their prompts, and attaches MPOL
/// scores computed over the given set.
pub fn embed_queries(
    model: &KprModel,
    samples: &[Sample],
    prompts: Option<&[crate::datamodel::KeypointSet]>,
    batch_size: usize,
) -> Result<Vec<Query>> {
    let items: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.image, prompts.map(|p| &p[i])))
        .collect();
    let desc = model.describe(&items, batch_size, false)?;
    let scores = if samples.is_empty() {
        Vec::new()
    } else {
        mpol(&samples.iter().map(Sample::occlusion_counts).collect::<Vec<_>>())?
    };
    Ok(samples
        .iter()
        .zip(desc)
        .zip(scores)
        .map(|((s, d), m)| Query {
            sample_id: s.id.clone(),
            identity: s.identity,
            descriptor: d,
            mpol: Some(m),
            multi_person: s.keypoints.visible_negatives() > 0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// Re-embeds the queries with a fraction of their positive keypoints removed
/// and evaluates each fraction against the fixed gallery index.
pub fn prompt_robustness_sweep(
    model: &KprModel,
    queries: &[Sample],
    index: &GalleryIndex,
    fractions: &[f64],
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("dropout fraction {fraction} outside [0,1]")));
        }
        let prompts: Vec<_> = queries
            .iter()
            .enumerate()
            .map(|(i, s)| prompt_dropout(&s.keypoints, fraction as f32, seed.wrapping_add(i as u64)))
            .collect();
        let q = embed_queries(model, queries, Some(&prompts), batch_size)?;
        let report = evaluate(&q, index)?;
        rows.push(SweepRow {
            fraction,
            rank1: report.rank1,
            map: report.map,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(f: Vec<Vec<f32>>, v: Vec<bool>) -> PartDescriptor {
        PartDescriptor { f, v, attention: None }
    }

    fn entry(id: &str, identity: u32, desc: PartDescriptor) -> IndexEntry {
        IndexEntry {
            sample_id: id.into(),
            identity,
            source_id: "s".into(),
            descriptor: desc,
        }
    }

    #[test]
    fn self_descriptor_ranks_first() {
        let q = d(vec![vec![1.0, 2.0], vec![0.5, 0.1]], vec![true, true]);
        let idx = GalleryIndex::new(vec![
            entry("b", 1, d(vec![vec![2.0, 1.0], vec![0.1, 0.5]], vec![true, true])),
            entry("a", 0, q.clone()),
        ])
        .unwrap();
        let r = rank_gallery(&q, &idx).unwrap();
        assert_eq!(r[0].sample_id, "a");
        assert!(r[0].distance.abs() < 1e-12);
    }

    #[test]
    fn invisible_query_orders_by_id() {
        let q = d(vec![vec![1.0]; 2], vec![false, false]);
        let g = |id: &str| entry(id, 0, d(vec![vec![1.0]; 2], vec![true, true]));
        let idx = GalleryIndex::new(vec![g("c"), g("a"), g("b")]).unwrap();
        let r = rank_gallery(&q, &idx).unwrap();
        let ids: Vec<_> = r.iter().map(|x| x.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(r.iter().all(|x| x.distance == 2.0 && x.no_overlap));
    }

    #[test]
    fn empty_index_is_an_error() {
        let q = d(vec![vec![1.0]], vec![true]);
        assert!(matches!(rank_gallery(&q, &GalleryIndex::default()), Err(Error::EmptyIndex)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = entry("a", 0, d(vec![vec![1.0]], vec![true]));
        assert!(GalleryIndex::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn last_ranked_match_has_ap_one_over_n() {
        assert_eq!(average_precision(&[false, false, false, true]), Some((0.25, 4)));
        assert_eq!(average_precision(&[true, false, true]), Some(((1.0 + 2.0 / 3.0) / 2.0, 1)));
        assert_eq!(average_precision(&[false]), None);
    }

    #[test]
    fn index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = GalleryIndex::new(vec![
            entry("a", 3, d(vec![vec![1.0, -2.5], vec![0.0, 7.0]], vec![true, false])),
            entry("b", 4, d(vec![vec![0.25, 1.0], vec![3.0, 1.0]], vec![false, true])),
        ])
        .unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(GalleryIndex::load(dir.path()).unwrap(), idx);
    }
}
