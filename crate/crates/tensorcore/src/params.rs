//! Named parameter storage: values, gradient slots, and checkpoint io.
//!
//! Entry order is insertion order and is the canonical order for the
//! checkpoint payload, so a model that registers its parameters in a fixed
//! sequence round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
    trainable: bool,
}

/// Ordered collection of named tensors with one gradient slot each.
/// Non-trainable entries (running statistics) are saved and loaded but are
/// never touched by `sgd_step`.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let grad = vec![0.0; value.len()];
        let idx = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, trainable });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_values(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, contribution: &[f64]) {
        let grad = &mut self.entries[id.0].grad;
        debug_assert_eq!(grad.len(), contribution.len());
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += *c as f32;
        }
    }

    /// Multiplies every gradient slot by `factor` (used to average
    /// accumulated mini-batch gradients before a step).
    pub fn scale_grads(&mut self, factor: f32) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g *= factor;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One plain SGD step: `p <- p - lr * grad` for every trainable entry,
    /// then all gradient slots are cleared.
    pub fn sgd_step(&mut self, lr: f32) {
        for e in &mut self.entries {
            if e.trainable {
                for (p, g) in e.value.data_mut().iter_mut().zip(&e.grad) {
                    *p -= lr * *g;
                }
            }
        }
        self.zero_grads();
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .entries
                .iter()
                .map(|e| ParamHeader {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for e in &self.entries {
            for v in e.value.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "version {} unsupported (expected {})",
                header.version, CHECKPOINT_VERSION
            )));
        }
        let mut set = ParameterSet::new();
        for p in &header.params {
            let len: usize = p.shape.iter().product();
            let mut data = vec![0.0f32; len];
            let mut buf = [0u8; 4];
            for v in &mut data {
                file.read_exact(&mut buf).map_err(|_| {
                    TensorError::Checkpoint(format!("payload truncated reading {:?}", p.name))
                })?;
                *v = f32::from_le_bytes(buf);
            }
            set.add(&p.name, Tensor::new(p.shape.clone(), data)?, p.trainable)?;
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(TensorError::Checkpoint("trailing bytes after payload".into()));
        }
        Ok((set, header.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    meta: serde_json::Value,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}
