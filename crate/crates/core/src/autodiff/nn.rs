//! Layers built on the tape: dense layers, batch-norm and the two-layer
//! MLP block used throughout the encoder and decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::graph::{Activation, BatchStats, Graph, Var};
use crate::autodiff::params::{ParamId, ParamKind, ParameterStore};
use crate::error::Result;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic updates produced by training-mode batch-norm layers,
/// applied to the store once the forward pass is done.
#[derive(Default)]
pub struct PendingStats(Vec<(ParamId, ParamId, BatchStats)>);

impl PendingStats {
    pub fn apply(self, store: &mut ParameterStore) {
        for (mean_id, var_id, stats) in self.0 {
            let n = stats.count as f64;
            let unbiased = n / (n - 1.0);
            for (m, b) in store.value_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            for (v, b) in store.value_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbiased;
            }
        }
    }
}

/// One forward pass: the tape plus what layers need to know about it.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a ParameterStore,
    pub mode: Mode,
    dropout: f64,
    rng: ChaCha8Rng,
    pending: PendingStats,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParameterStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            pending: PendingStats::default(),
        }
    }

    /// Enables inverted dropout with drop probability `p` in training mode.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        self.dropout = p;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn into_parts(self) -> (Graph, PendingStats) {
        (self.graph, self.pending)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let shape = self.graph.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.graph.input(mask);
        self.graph.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add_xavier(&format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = store.add(&format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, act: Activation) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.dense(x, w, Some(b), act)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParameterStore, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(&format!("{name}.scale"), ParamKind::Affine, Tensor::ones(&[features]))?,
            shift: store.add(&format!("{name}.shift"), ParamKind::Affine, Tensor::zeros(&[features]))?,
            running_mean: store.add(
                &format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[features]),
            )?,
            running_var: store.add(
                &format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(&[features]),
            )?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.scale);
        let beta = s.param(self.shift);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batchnorm(x, gamma, beta, None, BN_EPS)?;
                if let Some(stats) = stats {
                    s.pending.0.push((self.running_mean, self.running_var, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.store.value(self.running_mean).data();
                let var = s.store.value(self.running_var).data();
                let (y, _) = s.graph.batchnorm(x, gamma, beta, Some((mean, var)), BN_EPS)?;
                Ok(y)
            }
        }
    }
}

/// Where the batch-norm sits inside an [`Mlp`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPosition {
    /// linear → elu → linear → elu → batchnorm
    #[default]
    Output,
    /// linear → elu → linear → batchnorm → elu
    PreActivation,
    Off,
}

/// Two dense layers with ELU activations, batch-norm, and an optional
/// linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub bn: Option<BatchNorm>,
    pub bn_position: BnPosition,
    pub head: Option<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        widths: (usize, usize, usize),
        head: Option<usize>,
        bn_position: BnPosition,
    ) -> Result<Self> {
        let (input, hidden, output) = widths;
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), input, hidden)?;
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), hidden, output)?;
        let bn = match bn_position {
            BnPosition::Off => None,
            _ => Some(BatchNorm::new(store, &format!("{name}.bn"), output)?),
        };
        let head = head
            .map(|k| Linear::new(store, rng, &format!("{name}.head"), output, k))
            .transpose()?;
        Ok(Self {
            fc1,
            fc2,
            bn,
            bn_position,
            head,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x, Activation::Elu)?;
        let h = s.dropout(h)?;
        let mut h = match (&self.bn, self.bn_position) {
            (Some(bn), BnPosition::PreActivation) => {
                let pre = self.fc2.forward(s, h, Activation::Identity)?;
                let normed = bn.forward(s, pre)?;
                s.graph.elu(normed)
            }
            (Some(bn), _) => {
                let h = self.fc2.forward(s, h, Activation::Elu)?;
                bn.forward(s, h)?
            }
            (None, _) => self.fc2.forward(s, h, Activation::Elu)?,
        };
        if let Some(head) = &self.head {
            h = head.forward(s, h, Activation::Identity)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(store: &mut ParameterStore) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Mlp::new(store, &mut rng, "m", (3, 5, 4), Some(2), BnPosition::Output).unwrap()
    }

    #[test]
    fn zero_input_eval_is_finite_and_deterministic() {
        let mut store = ParameterStore::new();
        let mlp = block(&mut store);
        let run = |store: &ParameterStore| {
            let mut s = Session::new(store, Mode::Eval);
            let x = s.graph.input(Tensor::zeros(&[4, 3]));
            let y = mlp.forward(&mut s, x).unwrap();
            s.graph.value(y).clone()
        };
        let a = run(&store);
        assert!(a.is_finite());
        assert_eq!(a, run(&store));
        assert_eq!(a.shape(), &[4, 2]);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut store = ParameterStore::new();
        let mlp = block(&mut store);
        let mut s = Session::new(&store, Mode::Train);
        let x = s.graph.input(
            Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0], vec![0.3, -1.0, 2.0]]).unwrap(),
        );
        let y = mlp.forward(&mut s, x).unwrap();
        let v = s.graph.value(y);
        assert_eq!(v.row(0), v.row(2));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut store = ParameterStore::new();
        let mlp = block(&mut store);
        let before = store.value(mlp.bn.as_ref().unwrap().running_mean).clone();
        let mut s = Session::new(&store, Mode::Train);
        let x = s.graph.input(Tensor::from_fn(&[6, 3], |i| i as f64 * 0.1));
        mlp.forward(&mut s, x).unwrap();
        let (_, pending) = s.into_parts();
        pending.apply(&mut store);
        assert_ne!(store.value(mlp.bn.as_ref().unwrap().running_mean), &before);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut store = ParameterStore::new();
        let mlp = block(&mut store);
        let x = Tensor::from_fn(&[8, 3], |i| (i as f64).sin());
        let eval = |p: f64| {
            let mut s = Session::new(&store, Mode::Eval).with_dropout(p, 1);
            let xv = s.graph.input(x.clone());
            let y = mlp.forward(&mut s, xv).unwrap();
            s.graph.value(y).clone()
        };
        assert_eq!(eval(0.0), eval(0.5));
    }
}
