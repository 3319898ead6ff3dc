//! FNRI1 dataset files, normalization, batching and the time split between
//! encoder input and decoder target.
//!
//! Layout: `u32` little-endian header length, a JSON [`DatasetHeader`], then
//! per example `T·N·D` little-endian `f32` trajectory values followed by
//! `layers·N·N` `u8` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::read_json_header;
use crate::error::{Error, Result};
use crate::sim::{SimConfig, TrajectoryRecord, STATE_DIM};
use crate::tensor::Tensor;

pub const MAGIC: &str = "FNRI1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub num_types: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub num_examples: usize,
    pub n_particles: usize,
    pub t_record: usize,
    pub dims: usize,
    pub layers: Vec<LayerInfo>,
    pub sim_config: SimConfig,
    pub dataset_seed: u64,
    /// Per-dimension max-abs over the training split.
    pub normalization: Option<[f64; STATE_DIM]>,
}

impl DatasetHeader {
    fn example_floats(&self) -> usize {
        self.t_record * self.n_particles * self.dims
    }

    fn example_labels(&self) -> usize {
        self.layers.len() * self.n_particles * self.n_particles
    }

    fn payload_len(&self) -> usize {
        self.num_examples * (self.example_floats() * 4 + self.example_labels())
    }
}

/// In-memory dataset: trajectories as f64 `[num, T, N, D]`, labels as
/// `[num, layers, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    trajectories: Vec<f64>,
    labels: Vec<u8>,
    normalized: bool,
}

impl Dataset {
    pub fn from_records(records: &[TrajectoryRecord], sim_config: &SimConfig, dataset_seed: u64) -> Result<Self> {
        let n = sim_config.n_particles;
        let layers: Vec<LayerInfo> = sim_config
            .system
            .layers()
            .iter()
            .map(|k| LayerInfo {
                name: k.name().to_string(),
                num_types: 2,
            })
            .collect();
        let header = DatasetHeader {
            magic: MAGIC.into(),
            version: VERSION,
            num_examples: records.len(),
            n_particles: n,
            t_record: sim_config.t_record,
            dims: STATE_DIM,
            layers,
            sim_config: sim_config.clone(),
            dataset_seed,
            normalization: None,
        };
        let mut trajectories = Vec::with_capacity(records.len() * header.example_floats());
        let mut labels = Vec::with_capacity(records.len() * header.example_labels());
        for rec in records {
            if rec.trajectory.shape() != [header.t_record, n, STATE_DIM] {
                return Err(Error::shape("dataset record", rec.trajectory.shape(), &[header.t_record, n, STATE_DIM]));
            }
            trajectories.extend_from_slice(rec.trajectory.data());
            for (_, m) in &rec.graph.layers {
                labels.extend_from_slice(m);
            }
        }
        Ok(Self {
            header,
            trajectories,
            labels,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.header.num_examples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_layers(&self) -> usize {
        self.header.layers.len()
    }

    /// Trajectory of example `k`, flattened `[T, N, D]`.
    pub fn trajectory(&self, k: usize) -> &[f64] {
        let size = self.header.example_floats();
        &self.trajectories[k * size..(k + 1) * size]
    }

    /// Labels of example `k`, flattened `[layers, N, N]`.
    pub fn labels(&self, k: usize) -> &[u8] {
        let size = self.header.example_labels();
        &self.labels[k * size..(k + 1) * size]
    }

    /// Keeps only the first `count` examples.
    pub fn truncate(&mut self, count: usize) {
        let count = count.min(self.len());
        self.trajectories.truncate(count * self.header.example_floats());
        self.labels.truncate(count * self.header.example_labels());
        self.header.num_examples = count;
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.normalized {
            return Err(Error::Contract("normalized datasets are not written; write the raw data".into()));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(4 + header.len() + self.header.payload_len());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let (floats, labels) = (self.header.example_floats(), self.header.example_labels());
        for k in 0..self.len() {
            for v in &self.trajectories[k * floats..(k + 1) * floats] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.extend_from_slice(&self.labels[k * labels..(k + 1) * labels]);
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start): (DatasetHeader, usize) = read_json_header(bytes)?;
        if header.magic != MAGIC {
            return Err(Error::Format {
                offset: 4,
                reason: format!("bad magic {:?}", header.magic),
            });
        }
        if header.version != VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {}", header.version),
            });
        }
        if header.dims != STATE_DIM {
            return Err(Error::Format {
                offset: 4,
                reason: format!("expected {STATE_DIM} feature dimensions, header says {}", header.dims),
            });
        }
        let payload = &bytes[start..];
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("truncated payload: {} of {expected} bytes", payload.len()),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format {
                offset: (start + expected) as u64,
                reason: "trailing bytes after payload".into(),
            });
        }
        let (floats, label_len) = (header.example_floats(), header.example_labels());
        let mut trajectories = Vec::with_capacity(header.num_examples * floats);
        let mut labels = Vec::with_capacity(header.num_examples * label_len);
        let mut at = 0;
        for _ in 0..header.num_examples {
            for chunk in payload[at..at + 4 * floats].chunks_exact(4) {
                trajectories.push(f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes"))));
            }
            at += 4 * floats;
            labels.extend_from_slice(&payload[at..at + label_len]);
            at += label_len;
        }
        Ok(Self {
            header,
            trajectories,
            labels,
            normalized: false,
        })
    }

    /// Per-dimension max |value| over every example and time step.
    pub fn max_abs(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0f64; STATE_DIM];
        for row in self.trajectories.chunks_exact(STATE_DIM) {
            for (o, v) in out.iter_mut().zip(row) {
                *o = (*o).max(v.abs());
            }
        }
        out
    }

    /// Divides each dimension by its statistic; zero statistics leave the
    /// dimension unchanged.
    pub fn normalize_with(&self, stats: &[f64; STATE_DIM]) -> Result<Self> {
        if self.normalized {
            return Err(Error::Contract("dataset is already normalized".into()));
        }
        let mut out = self.clone();
        out.scale(stats, |v, s| v / s);
        out.header.normalization = Some(*stats);
        out.normalized = true;
        Ok(out)
    }

    pub fn denormalize(&self) -> Result<Self> {
        let stats = match (self.normalized, self.header.normalization) {
            (true, Some(stats)) => stats,
            _ => return Err(Error::Contract("dataset is not normalized".into())),
        };
        let mut out = self.clone();
        out.scale(&stats, |v, s| v * s);
        out.normalized = false;
        Ok(out)
    }

    fn scale(&mut self, stats: &[f64; STATE_DIM], f: impl Fn(f64, f64) -> f64) {
        for row in self.trajectories.chunks_exact_mut(STATE_DIM) {
            for (v, s) in row.iter_mut().zip(stats) {
                if *s > 0.0 {
                    *v = f(*v, *s);
                }
            }
        }
    }

    /// Gathers the given examples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let h = &self.header;
        let mut traj = Vec::with_capacity(indices.len() * h.example_floats());
        let mut labels = Vec::with_capacity(indices.len() * h.example_labels());
        for &k in indices {
            traj.extend_from_slice(self.trajectory(k));
            labels.extend_from_slice(self.labels(k));
        }
        Batch {
            trajectories: Tensor::new(&[indices.len(), h.t_record, h.n_particles, h.dims], traj)
                .expect("consistent batch"),
            labels,
            num_layers: h.layers.len(),
            indices: indices.to_vec(),
        }
    }
}

/// Normalizes with the statistics stored in the header.
pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    let stats = dataset
        .header
        .normalization
        .ok_or_else(|| Error::Contract("dataset header carries no normalization statistics".into()))?;
    dataset.normalize_with(&stats)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.write(path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, N, D]`
    pub trajectories: Tensor,
    /// `[B, layers, N, N]`, flattened.
    pub labels: Vec<u8>,
    pub num_layers: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn n_particles(&self) -> usize {
        self.trajectories.shape()[2]
    }

    /// Label of layer `a` for ordered pair `(i, j)` of batch item `b`.
    pub fn label(&self, b: usize, a: usize, i: usize, j: usize) -> u8 {
        let n = self.n_particles();
        self.labels[((b * self.num_layers + a) * n + i) * n + j]
    }
}

/// Visiting order for one pass over `len` examples: a seeded shuffle, or
/// the natural order when `shuffle_seed` is `None`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Batches of `batch_size` covering every example once; the last batch may
/// be short.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::InvalidBatch {
            op: "batch_iter",
            reason: format!("batch size {batch_size} for {} examples", dataset.len()),
        });
    }
    let order = epoch_order(dataset.len(), shuffle_seed);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| dataset.batch(&idx)))
}

/// Splits `[B, T, N, D]` along time into the first and second halves.
pub fn split_halves(trajectories: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = trajectories.shape();
    if shape.len() != 4 {
        return Err(Error::Contract(format!("expected [B, T, N, D], got {shape:?}")));
    }
    let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    if t % 2 != 0 {
        return Err(Error::Contract(format!("cannot bisect odd trajectory length {t}")));
    }
    let half = t / 2;
    let step = n * d;
    let mut first = Vec::with_capacity(b * half * step);
    let mut second = Vec::with_capacity(b * half * step);
    for ex in trajectories.data().chunks_exact(t * step) {
        first.extend_from_slice(&ex[..half * step]);
        second.extend_from_slice(&ex[half * step..]);
    }
    Ok((
        Tensor::new(&[b, half, n, d], first)?,
        Tensor::new(&[b, half, n, d], second)?,
    ))
}
