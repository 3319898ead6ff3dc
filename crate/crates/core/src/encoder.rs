//! Graph encoder: node → edge → node → edge message passing over the fully
//! connected particle graph, producing K edge-type logits per ordered pair,
//! plus the posterior, concrete sampling and sigmoid read-outs.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnPosition, Graph, Mlp, ParameterStore, Session, Var};
use crate::error::{Error, Result};
use crate::scheme::{ordered_pairs, FactorisationScheme, Variant};
use crate::tensor::Tensor;

/// Row indices of senders and receivers for every ordered pair of every
/// batch item, in `[B·N, ·]` node-row space.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub batch: usize,
    pub n: usize,
    pub senders: Rc<[usize]>,
    pub receivers: Rc<[usize]>,
}

impl PairIndex {
    pub fn new(batch: usize, n: usize) -> Self {
        let pairs = ordered_pairs(n);
        let mut senders = Vec::with_capacity(batch * pairs.len());
        let mut receivers = Vec::with_capacity(batch * pairs.len());
        for b in 0..batch {
            for &(i, j) in &pairs {
                senders.push(b * n + i);
                receivers.push(b * n + j);
            }
        }
        Self {
            batch,
            n,
            senders: senders.into(),
            receivers: receivers.into(),
        }
    }

    pub fn pairs_per_example(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn rows(&self) -> usize {
        self.senders.len()
    }

    pub fn nodes(&self) -> usize {
        self.batch * self.n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Time steps seen by the encoder.
    pub t_enc: usize,
    pub dims: usize,
    pub hidden: usize,
    /// Width of the logit head.
    pub k: usize,
    pub bn_position: BnPosition,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    emb: Mlp,
    edge1: Mlp,
    node1: Mlp,
    edge2: Mlp,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, config: EncoderConfig) -> Result<Self> {
        let h = config.hidden;
        let bn = config.bn_position;
        Ok(Self {
            emb: Mlp::new(store, rng, "enc.emb", (config.t_enc * config.dims, h, h), None, bn)?,
            edge1: Mlp::new(store, rng, "enc.edge1", (2 * h, h, h), None, bn)?,
            node1: Mlp::new(store, rng, "enc.node1", (h, h, h), None, bn)?,
            edge2: Mlp::new(store, rng, "enc.edge2", (2 * h, h, h), Some(config.k), bn)?,
            config,
        })
    }

    /// Logits `[B·N(N−1), K]` from trajectories `[B, T_enc, N, D]`.
    pub fn forward(&self, s: &mut Session, trajectories: &Tensor) -> Result<Var> {
        let shape = trajectories.shape();
        let expected = [shape.first().copied().unwrap_or(0), self.config.t_enc, shape.get(2).copied().unwrap_or(0), self.config.dims];
        if shape.len() != 4 || shape != expected {
            return Err(Error::shape("encode", shape, &expected));
        }
        let (b, n) = (shape[0], shape[2]);
        let pairs = PairIndex::new(b, n);
        let x = s.graph.input(node_features(trajectories));
        let h1 = self.emb.forward(s, x)?;
        let e1 = node_to_edge(s, h1, &pairs)?;
        let e1 = self.edge1.forward(s, e1)?;
        let agg = s.graph.scatter_add_rows(e1, pairs.receivers.clone(), pairs.nodes())?;
        let h2 = self.node1.forward(s, agg)?;
        let e2 = node_to_edge(s, h2, &pairs)?;
        self.edge2.forward(s, e2)
    }
}

/// `[B, T, N, D]` → `[B·N, T·D]`, one row per particle with its whole
/// trajectory.
pub fn node_features(trajectories: &Tensor) -> Tensor {
    let shape = trajectories.shape();
    let (b, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let src = trajectories.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for ni in 0..n {
            for ti in 0..t {
                let at = ((bi * t + ti) * n + ni) * d;
                out.extend_from_slice(&src[at..at + d]);
            }
        }
    }
    Tensor::new(&[b * n, t * d], out).expect("consistent node features")
}

/// `[h_i, h_j]` for every ordered pair.
pub fn node_to_edge(s: &mut Session, h: Var, pairs: &PairIndex) -> Result<Var> {
    let send = s.graph.gather_rows(h, pairs.senders.clone())?;
    let recv = s.graph.gather_rows(h, pairs.receivers.clone())?;
    s.graph.concat_cols(&[send, recv])
}

/// Splits logits into contiguous per-layer slices.
pub fn segment_logits(g: &mut Graph, h: Var, scheme: &FactorisationScheme) -> Result<Vec<Var>> {
    let k = g.value(h).cols();
    if k != scheme.total() {
        return Err(Error::shape("segment_logits", g.shape(h), &[scheme.total()]));
    }
    if scheme.num_layers() == 1 {
        return Ok(vec![h]);
    }
    scheme
        .segments()
        .into_iter()
        .map(|(start, len)| g.slice_cols(h, start, len))
        .collect()
}

/// Softmax per layer segment.
pub fn posterior(g: &mut Graph, segments: &[Var]) -> Vec<Var> {
    segments.iter().map(|&v| g.softmax(v)).collect()
}

pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    Tensor::from_fn(shape, |_| gumbel.sample(rng))
}

/// Row-wise argmax one-hot; ties go to the lowest index.
pub fn one_hot_argmax(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let k = argmax(x.row(r));
        out.data_mut()[r * c + k] = 1.0;
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Concrete relaxation `softmax((h + g)/τ)` per segment, optionally made
/// one-hot in the forward pass with the soft sample's gradient.
pub fn gumbel_sample<R: Rng + ?Sized>(
    g: &mut Graph,
    segments: &[Var],
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Vec<Var>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    segments
        .iter()
        .map(|&h| {
            let noise = g.input(gumbel_noise(rng, g.shape(h)));
            let perturbed = g.add(h, noise)?;
            let scaled = g.scale(perturbed, 1.0 / tau);
            let soft = g.softmax(scaled);
            if hard {
                let one_hot = one_hot_argmax(g.value(soft));
                g.straight_through(soft, one_hot)
            } else {
                Ok(soft)
            }
        })
        .collect()
}

pub fn sigmoid_edges(g: &mut Graph, h: Var) -> Var {
    g.sigmoid(h)
}

pub fn concat_layers(g: &mut Graph, layers: &[Var]) -> Result<Var> {
    match layers {
        [single] => Ok(*single),
        _ => g.concat_cols(layers),
    }
}

/// How logits become the latent vector fed to the decoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Latent {
    /// Concrete samples (NRI/fNRI) or sigmoids (sfNRI).
    Sample { tau: f64, hard: bool },
    /// Argmax one-hot per layer (NRI/fNRI) or sigmoids (sfNRI); no noise.
    Deterministic,
}

/// Full latent vector `z` for the scheme.
pub fn latent<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: Var,
    scheme: &FactorisationScheme,
    how: Latent,
    rng: &mut R,
) -> Result<Var> {
    if scheme.variant == Variant::Sfnri {
        return Ok(sigmoid_edges(g, logits));
    }
    let segments = segment_logits(g, logits, scheme)?;
    let layers = match how {
        Latent::Sample { tau, hard } => gumbel_sample(g, &segments, tau, rng, hard)?,
        Latent::Deterministic => segments
            .iter()
            .map(|&v| g.input(one_hot_argmax(g.value(v))))
            .collect(),
    };
    concat_layers(g, &layers)
}

/// Convenience for inference: logits `[rows, K]` without a tape.
pub fn probabilities(logits: &Tensor, scheme: &FactorisationScheme) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.input(logits.clone());
    let z = if scheme.variant == Variant::Sfnri {
        sigmoid_edges(&mut g, h)
    } else {
        let segs = segment_logits(&mut g, h, scheme)?;
        let probs = posterior(&mut g, &segs);
        concat_layers(&mut g, &probs)?
    };
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_rows_hold_whole_trajectories() {
        let x = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64);
        // t0: n0=0 n1=1; t1: n0=2 n1=3
        assert_eq!(node_features(&x).data(), &[0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
    }

    #[test]
    fn pair_index_rows() {
        let p = PairIndex::new(2, 3);
        assert_eq!(p.rows(), 12);
        assert_eq!(&p.senders[6..8], &[3, 3]);
        assert_eq!(&p.receivers[6..8], &[4, 5]);
    }
}
