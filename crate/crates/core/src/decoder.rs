//! Markovian decoder: per-edge-type messages weighted by the latent vector,
//! summed at each receiver, and a residual state update. Rollouts with
//! periodic ground-truth injection (training) or free-running (evaluation).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Linear, ParameterStore, Session, Var};
use crate::encoder::PairIndex;
use crate::error::{Error, Result};
use crate::scheme::FactorisationScheme;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dims: usize,
    pub hidden: usize,
    pub scheme: FactorisationScheme,
}

#[derive(Clone, Debug)]
struct EdgeFn {
    column: usize,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    edges: Vec<EdgeFn>,
    out1: Linear,
    out2: Linear,
    out3: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, config: DecoderConfig) -> Result<Self> {
        let (d, h) = (config.dims, config.hidden);
        let edges = config
            .scheme
            .active_types()
            .into_iter()
            .map(|k| {
                Ok(EdgeFn {
                    column: k,
                    fc1: Linear::new(store, rng, &format!("dec.edge{k}.fc1"), 2 * d, h)?,
                    fc2: Linear::new(store, rng, &format!("dec.edge{k}.fc2"), h, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out1 = Linear::new(store, rng, "dec.out.fc1", h + d, h)?;
        let out2 = Linear::new(store, rng, "dec.out.fc2", h, h)?;
        let out3 = Linear::new(store, rng, "dec.out.fc3", h, d)?;
        // Starts as the static predictor μ = x.
        store.value_mut(out3.weight).data_mut().fill(0.0);
        Ok(Self {
            out1,
            out2,
            out3,
            edges,
            config,
        })
    }

    /// Number of per-type message functions.
    pub fn num_edge_functions(&self) -> usize {
        self.edges.len()
    }

    /// Output of the message function for latent column `k` on `[x_i, x_j]`.
    pub fn edge_message(&self, s: &mut Session, pre: Var, k: usize) -> Result<Option<Var>> {
        match self.edges.iter().find(|e| e.column == k) {
            Some(e) => {
                let h = e.fc1.forward(s, pre, Activation::Elu)?;
                Ok(Some(e.fc2.forward(s, h, Activation::Elu)?))
            }
            None => Ok(None),
        }
    }

    /// `μ^{t+1}` `[B·N, D]` from `x^t` `[B·N, D]` and `z` `[B·N(N−1), K]`.
    pub fn step(&self, s: &mut Session, x: Var, z: Var, pairs: &PairIndex) -> Result<Var> {
        let k = self.config.scheme.total();
        if s.graph.shape(z) != [pairs.rows(), k] {
            return Err(Error::shape("decode_step", s.graph.shape(z), &[pairs.rows(), k]));
        }
        if s.graph.shape(x) != [pairs.nodes(), self.config.dims] {
            return Err(Error::shape("decode_step", s.graph.shape(x), &[pairs.nodes(), self.config.dims]));
        }
        let send = s.graph.gather_rows(x, pairs.senders.clone())?;
        let recv = s.graph.gather_rows(x, pairs.receivers.clone())?;
        let pre = s.graph.concat_cols(&[send, recv])?;
        let mut terms = Vec::with_capacity(self.edges.len());
        let mut cols = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            let h = e.fc1.forward(s, pre, Activation::Elu)?;
            terms.push(e.fc2.forward(s, h, Activation::Elu)?);
            cols.push(e.column);
        }
        let agg = if terms.is_empty() {
            s.graph.input(Tensor::zeros(&[pairs.nodes(), self.config.hidden]))
        } else {
            let msg = s.graph.weighted_sum(&terms, z, &cols)?;
            s.graph.scatter_add_rows(msg, pairs.receivers.clone(), pairs.nodes())?
        };
        let h = s.graph.concat_cols(&[agg, x])?;
        let h = self.out1.forward(s, h, Activation::Elu)?;
        let h = self.out2.forward(s, h, Activation::Elu)?;
        let delta = self.out3.forward(s, h, Activation::Identity)?;
        s.graph.add(x, delta)
    }

    /// Predictions for steps `2..=T` from truth `[B, T, N, D]`; the truth is
    /// fed in at steps `1, M+1, 2M+1, …` and predictions otherwise.
    pub fn rollout_teacher_forced(&self, s: &mut Session, truth: &Tensor, z: Var, m: usize) -> Result<Vec<Var>> {
        if m == 0 {
            return Err(Error::Config("teacher-forcing period must be at least 1".into()));
        }
        let (b, t, n, _) = dims4(truth)?;
        let pairs = PairIndex::new(b, n);
        let mut preds = Vec::with_capacity(t.saturating_sub(1));
        let mut prev: Option<Var> = None;
        for step in 0..t.saturating_sub(1) {
            let x = match prev {
                Some(p) if step % m != 0 => p,
                _ => s.graph.input(time_slice(truth, step)),
            };
            let mu = self.step(s, x, z, &pairs)?;
            preds.push(mu);
            prev = Some(mu);
        }
        Ok(preds)
    }

    /// `steps` free-running predictions from `x1` `[B, N, D]`.
    pub fn rollout_free(&self, s: &mut Session, x1: &Tensor, z: Var, steps: usize) -> Result<Vec<Var>> {
        if steps == 0 {
            return Err(Error::Contract("rollout needs at least one step".into()));
        }
        let shape = x1.shape();
        if shape.len() != 3 {
            return Err(Error::Contract(format!("expected [B, N, D], got {shape:?}")));
        }
        let pairs = PairIndex::new(shape[0], shape[1]);
        let mut x = s.graph.input(x1.clone().reshape(&[shape[0] * shape[1], shape[2]])?);
        let mut preds = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = self.step(s, x, z, &pairs)?;
            preds.push(x);
        }
        Ok(preds)
    }
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, t, n, d] => Ok((b, t, n, d)),
        _ => Err(Error::Contract(format!("expected [B, T, N, D], got {:?}", x.shape()))),
    }
}

/// State at time index `t` of `[B, T, N, D]` as `[B·N, D]`.
pub fn time_slice(x: &Tensor, t: usize) -> Tensor {
    let shape = x.shape();
    let (b, tt, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let step = n * d;
    let mut out = Vec::with_capacity(b * step);
    for bi in 0..b {
        let at = (bi * tt + t) * step;
        out.extend_from_slice(&x.data()[at..at + step]);
    }
    Tensor::new(&[b * n, d], out).expect("consistent slice")
}

/// `Σ ‖x − μ‖² / (2σ²)` over predicted steps `2..=T` of `truth`.
pub fn gaussian_nll(g: &mut Graph, preds: &[Var], truth: &Tensor, sigma2: f64) -> Result<Var> {
    let sq = sq_error(g, preds, truth)?;
    Ok(g.scale(sq, 1.0 / (2.0 * sigma2)))
}

/// `Σ ‖x − μ‖²` over predicted steps `2..=T` of `truth`.
pub fn sq_error(g: &mut Graph, preds: &[Var], truth: &Tensor) -> Result<Var> {
    let (_, t, _, _) = dims4(truth)?;
    if preds.len() + 1 != t {
        return Err(Error::Contract(format!(
            "{} predictions for a length-{t} target",
            preds.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (step, &mu) in preds.iter().enumerate() {
        let term = g.sq_diff_sum(mu, &time_slice(truth, step + 1))?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("no predictions".into()))
}
