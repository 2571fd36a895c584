//! Safetensors checkpoints: every named parameter and running statistic, plus
//! metadata holding the format version, the run configuration, the identity
//! count and the trainer RNG state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::ClassifierBank;
use crate::model::nn::ParamStore;
use crate::model::KprModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: RunConfig,
    pub num_identities: usize,
    pub epoch: usize,
    /// Serialized trainer RNG, for resuming.
    pub rng_state: Option<String>,
}

fn dtype_name(d: DType) -> Result<Dtype> {
    match d {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save(store: &ParamStore, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, p) in store.params() {
        let t = p.var.as_tensor();
        let flat = t.flatten_all()?;
        let raw: Vec<u8> = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        bytes.push((name, dtype_name(t.dtype())?, t.dims().to_vec(), raw));
    }
    let views = bytes
        .iter()
        .map(|(n, d, s, b)| {
            TensorView::new(*d, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut md = HashMap::new();
    md.insert("format_version".to_string(), meta.format_version.to_string());
    md.insert("meta".to_string(), serde_json::to_string(meta)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(md), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads metadata and tensors without building a model.
pub fn read(path: impl AsRef<Path>) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(ck)?;
    let md = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
    let version: u32 = md
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing format_version", path.display())))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format_version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_str(
        md.get("meta")
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing meta", path.display())))?,
    )?;
    let st = SafeTensors::deserialize(&buf).map_err(ck)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {other:?}"))),
        };
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

pub struct LoadedModel {
    pub store: ParamStore,
    pub model: KprModel,
    pub bank: Option<ClassifierBank>,
    pub meta: CheckpointMeta,
}

/// Rebuilds the network described by the checkpoint and loads its weights.
pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<LoadedModel> {
    let (meta, tensors) = read(path)?;
    let (store, model, bank) = crate::train::build_network(&meta.config, meta.num_identities, dtype)?;
    store.load_values(&tensors)?;
    Ok(LoadedModel { store, model, bank, meta })
}
