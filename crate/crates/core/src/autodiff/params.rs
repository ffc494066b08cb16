use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{DspError, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-a, a)` with `a = sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Named parameters, their gradient buffers and optimizer moments.
///
/// Initial values depend only on `(init_seed, name, shape)`, never on registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    init_seed: u64,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    adam: Option<AdamState>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the store seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        ParamStore {
            init_seed,
            names: Vec::new(),
            index: BTreeMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            adam: None,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(DspError::InvalidConfig(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
            Init::FanIn(fan_in) => {
                let a = (1.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.init_seed, name));
                let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
                Tensor::from_vec(rows, cols, data)
            }
        };
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(None);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DspError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.values[id])
    }

    pub fn grad(&self, name: &str) -> Result<Option<&Tensor>> {
        Ok(self.grads[self.id(name)?].as_ref())
    }

    pub(crate) fn value_by_id(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub(crate) fn accumulate_grad(&mut self, id: usize, g: &Tensor) {
        match &mut self.grads[id] {
            Some(t) => t.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Multiplies all accumulated gradients by `k` (averaging over a batch).
    pub fn scale_grads(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Moves the gradients accumulated in `other` (a store with the same layout) into `self`.
    pub fn take_grads_from(&mut self, other: &mut ParamStore) {
        debug_assert_eq!(self.names, other.names);
        std::mem::swap(&mut self.grads, &mut other.grads);
        other.zero_grads();
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.step)
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left untouched;
    /// gradients are cleared afterwards.
    pub fn optimizer_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if self.grads.iter().all(Option::is_none) {
            return Err(DspError::MissingGrad("no parameter received a gradient".into()));
        }
        let values = &self.values;
        let state = self.adam.get_or_insert_with(|| AdamState {
            step: 0,
            m: values.iter().map(|v| Tensor::zeros(v.rows, v.cols)).collect(),
            v: values.iter().map(|v| Tensor::zeros(v.rows, v.cols)).collect(),
        });
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in self.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v, p) = (&mut state.m[i].data, &mut state.v[i].data, &mut self.values[i].data);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    fn digest(&self, meta: &BTreeMap<String, serde_json::Value>) -> String {
        let mut h = Sha256::new();
        h.update(self.init_seed.to_le_bytes());
        let put = |h: &mut Sha256, t: &Tensor| {
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update([0u8]);
            put(&mut h, v);
        }
        if let Some(a) = &self.adam {
            h.update(a.step.to_le_bytes());
            a.m.iter().chain(&a.v).for_each(|t| put(&mut h, t));
        }
        h.update(serde_json::to_string(meta).unwrap_or_default().as_bytes());
        hex::encode(h.finalize())
    }

    /// Serializes values, optimizer moments and caller metadata with a content checksum.
    pub fn to_checkpoint(&self, meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            init_seed: self.init_seed,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| NamedArray {
                    name: n.clone(),
                    shape: [v.rows, v.cols],
                    data: v.data.clone(),
                })
                .collect(),
            optimizer: self.adam.as_ref().map(|a| OptimizerState {
                step: a.step,
                m: a.m.iter().map(|t| t.data.clone()).collect(),
                v: a.v.iter().map(|t| t.data.clone()).collect(),
            }),
            checksum: self.digest(&meta),
            meta,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(DspError::SchemaVersionMismatch {
                found: c.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        let mut s = ParamStore::new(c.init_seed);
        for p in &c.params {
            if p.shape[0] * p.shape[1] != p.data.len() {
                return Err(DspError::parse("params", format!("{} has wrong length", p.name)));
            }
            s.register(&p.name, p.shape[0], p.shape[1], Init::Zeros)?;
            s.values.last_mut().expect("just registered").data = p.data.clone();
        }
        if let Some(o) = &c.optimizer {
            let rebuild = |xs: &[Vec<f64>]| -> Result<Vec<Tensor>> {
                if xs.len() != s.values.len() {
                    return Err(DspError::parse("optimizer", "moment count mismatch"));
                }
                xs.iter()
                    .zip(&s.values)
                    .map(|(d, v)| {
                        if d.len() != v.len() {
                            Err(DspError::parse("optimizer", "moment length mismatch"))
                        } else {
                            Ok(Tensor::from_vec(v.rows, v.cols, d.clone()))
                        }
                    })
                    .collect()
            };
            s.adam = Some(AdamState {
                step: o.step,
                m: rebuild(&o.m)?,
                v: rebuild(&o.v)?,
            });
        }
        let computed = s.digest(&c.meta);
        if computed != c.checksum {
            return Err(DspError::ChecksumMismatch {
                stored: c.checksum.clone(),
                computed,
            });
        }
        Ok(s)
    }

    /// Same names and bitwise-identical values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// On-disk parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub init_seed: u64,
    pub params: Vec<NamedArray>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub checksum: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| DspError::parse("checkpoint", e.to_string()))?;
        std::fs::write(path, s).map_err(|e| DspError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| DspError::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| DspError::Parse {
            line: Some(e.line()),
            field: "checkpoint".into(),
            message: e.to_string(),
        })
    }
}
