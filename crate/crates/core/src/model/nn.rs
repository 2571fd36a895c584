//! Minimal layer set on top of candle: a named, seeded parameter store and
//! the handful of layers the encoder and heads need.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics: saved with the weights, never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named parameters created from a seeded generator, so that two stores built
/// with the same seed and construction order are bitwise identical.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Mutex<BTreeMap<String, Param>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            params: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Snapshot of all parameters ordered by name.
    pub fn params(&self) -> Vec<(String, Param)> {
        let map = self.params.lock().expect("param store poisoned");
        map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.params
            .lock()
            .expect("param store poisoned")
            .get(name)
            .cloned()
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, p)| (n, p.var))
            .collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn create(&self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
                Init::TruncNormal(std) => {
                    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut *rng);
                            if v.abs() <= 2.0 * std {
                                break v;
                            }
                        })
                        .collect()
                }
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        let mut map = self.params.lock().expect("param store poisoned");
        if map.contains_key(&name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        map.insert(name, Param { var, kind });
        Ok(tensor)
    }

    /// Overwrites parameter values from a named tensor map. Every parameter
    /// must be present with a matching shape.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, param) in self.params() {
            let t = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if t.dims() != param.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}': stored shape {:?}, expected {:?}",
                    t.dims(),
                    param.var.dims()
                )));
            }
            param.var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| self.get(k).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }
}

/// Name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store
            .create(self.full(name), shape, init, ParamKind::Trainable)
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full(name);
        self.store.create(full.clone(), shape, init, ParamKind::Buffer)?;
        Ok(self.store.get(&full).expect("just inserted").var)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` weights and zero bias.
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(scope, in_dim, out_dim, bias, Init::Uniform(bound))
    }

    pub fn with_init(
        scope: &Scope,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = scope.param("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(scope.param("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.weight.dims()[0];
        y.reshape(out)
    }
}

/// Normalisation over the last dimension with a learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: scope.param("weight", &[dim], Init::Ones)?,
            bias: scope.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Batch normalisation over rows of a `(rows, features)` matrix, with an
/// optional row mask: in training mode statistics are taken over the masked
/// rows only and folded into running estimates; evaluation uses the running
/// estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            weight: scope.param("weight", &[dim], Init::Ones)?,
            bias: scope.param("bias", &[dim], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[dim], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[dim], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// `mask`: `(rows,)` tensor of 0/1 weights, or `None` for all rows.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let rows = x.dims()[0];
        let (mean, var) = if train {
            let w = match mask {
                Some(m) => m.reshape((rows, 1))?,
                None => Tensor::ones((rows, 1), x.dtype(), x.device())?,
            };
            let count = w.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if count < 1.0 {
                (
                    self.running_mean.as_tensor().detach(),
                    self.running_var.as_tensor().detach(),
                )
            } else {
                let mean = (x.broadcast_mul(&w)?.sum(0)? / count)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = (centered.sqr()?.broadcast_mul(&w)?.sum(0)? / count)?;
                let m = self.momentum;
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}
