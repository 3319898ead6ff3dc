//! Named parameters with gradient slots, and their checkpoint file format.
//!
//! A checkpoint is a `u32` little-endian header length, a JSON header
//! (parameter names, shapes and a hash of the model configuration) and then
//! every parameter's values as little-endian `f64` in header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Dense-layer weight matrix; subject to L2 penalties.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Affine,
    /// Running statistic, updated outside the optimizer.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            kind,
            grad: Tensor::zeros(value.shape()),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform Xavier initialisation for a `[fan_in, fan_out]` weight.
    pub fn add_xavier<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound));
        self.add(name, ParamKind::Weight, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum of squared entries over all weight matrices.
    pub fn weight_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum()
    }

    pub fn write_checkpoint(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(config),
            config: config.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(
            4 + header_bytes.len() + 8 * self.params.iter().map(|p| p.value.len()).sum::<usize>(),
        );
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for p in &self.params {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint into a fresh store, returning it with the stored
    /// model configuration.
    pub fn read_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (header, mut offset) = read_json_header::<CheckpointHeader>(&bytes)?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint {} v{}", header.format, header.version),
            });
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(Error::Format {
                offset: 4,
                reason: "config hash does not match stored config".into(),
            });
        }
        let mut store = Self::new();
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    reason: format!("truncated payload for parameter {}", entry.name),
                });
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(&entry.name, entry.kind, Tensor::new(&entry.shape, data)?)?;
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Format {
                offset: offset as u64,
                reason: "trailing bytes after payload".into(),
            });
        }
        Ok((store, header.config))
    }
}

const CHECKPOINT_FORMAT: &str = "fnri-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config_hash: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(config).expect("json value serializes");
    Sha256::digest(&canonical)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parses a `u32`-length-prefixed JSON header, returning it and the payload
/// offset.
pub(crate) fn read_json_header<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<(T, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: 0,
            reason: "missing header length".into(),
        });
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 4 + len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("truncated header (declared {len} bytes)"),
        });
    }
    let header = serde_json::from_slice(&bytes[4..4 + len]).map_err(|e| Error::Format {
        offset: 4,
        reason: format!("bad header: {e}"),
    })?;
    Ok((header, 4 + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grad_keeps_values() {
        let mut store = ParameterStore::new();
        let id = store
            .add("w", ParamKind::Weight, Tensor::full(&[2, 2], 3.0))
            .unwrap();
        store.grad_mut(id).fill(5.0);
        store.zero_grad();
        assert_eq!(store.grad(id), &Tensor::zeros(&[2, 2]));
        assert_eq!(store.value(id), &Tensor::full(&[2, 2], 3.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.add("a", ParamKind::Bias, Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", ParamKind::Bias, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let id = store.add_xavier("w", 10, 14, &mut rng).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        store.add_xavier("enc.w", 3, 4, &mut rng).unwrap();
        store.add("enc.b", ParamKind::Bias, Tensor::full(&[4], 0.25)).unwrap();
        let config = serde_json::json!({"hidden": 4});
        store.write_checkpoint(&path, &config).unwrap();

        let (loaded, cfg) = ParameterStore::read_checkpoint(&path).unwrap();
        assert_eq!(cfg, config);
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            ParameterStore::read_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }
}
