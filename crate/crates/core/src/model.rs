//! A configured encoder/decoder pair with its parameters, and its
//! checkpoint round trip.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{BnPosition, Mode, ParameterStore, Session};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{latent, Encoder, EncoderConfig, Latent};
use crate::error::{Error, Result};
use crate::scheme::FactorisationScheme;
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Encoder and decoder trained jointly on the reconstruction objective.
    Learned,
    /// Encoder alone against ground-truth edge labels.
    Supervised,
    /// Decoder alone, fed the ground-truth graph.
    Truegraph,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "learned" => Ok(TrainMode::Learned),
            "supervised" => Ok(TrainMode::Supervised),
            "truegraph" => Ok(TrainMode::Truegraph),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected learned, supervised or truegraph)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scheme: FactorisationScheme,
    pub mode: TrainMode,
    pub n_particles: usize,
    pub dims: usize,
    /// Steps given to the encoder (the first half of each example).
    pub t_enc: usize,
    pub hidden: usize,
    pub tau: f64,
    pub sigma2: f64,
    /// Teacher-forcing period M.
    pub teacher_forcing: usize,
    /// Straight-through one-hot samples during training.
    pub hard_sample: bool,
    pub bn_position: BnPosition,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(scheme: FactorisationScheme, mode: TrainMode) -> Self {
        Self {
            scheme,
            mode,
            n_particles: 5,
            dims: STATE_DIM,
            t_enc: 50,
            hidden: 256,
            tau: 0.5,
            sigma2: 5e-5,
            teacher_forcing: 10,
            hard_sample: false,
            bn_position: BnPosition::Output,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.teacher_forcing == 0 || self.hidden == 0 || self.t_enc == 0 {
            return Err(Error::Config("teacher_forcing, hidden and t_enc must be at least 1".into()));
        }
        Ok(())
    }

    pub fn has_encoder(&self) -> bool {
        self.mode != TrainMode::Truegraph
    }

    pub fn has_decoder(&self) -> bool {
        self.mode != TrainMode::Supervised
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: Option<Encoder>,
    pub decoder: Option<Decoder>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = config
            .has_encoder()
            .then(|| {
                Encoder::new(
                    &mut store,
                    &mut rng,
                    EncoderConfig {
                        t_enc: config.t_enc,
                        dims: config.dims,
                        hidden: config.hidden,
                        k: config.scheme.total(),
                        bn_position: config.bn_position,
                    },
                )
            })
            .transpose()?;
        let decoder = config
            .has_decoder()
            .then(|| {
                Decoder::new(
                    &mut store,
                    &mut rng,
                    DecoderConfig {
                        dims: config.dims,
                        hidden: config.hidden,
                        scheme: config.scheme.clone(),
                    },
                )
            })
            .transpose()?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encoder(&self) -> Result<&Encoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Contract("this model has no encoder".into()))
    }

    pub fn decoder(&self) -> Result<&Decoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Contract("this model has no decoder".into()))
    }

    /// Eval-mode logits `[B·N(N−1), K]` for encoder input `[B, T_enc, N, D]`.
    pub fn logits(&self, encoder_input: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, Mode::Eval);
        let h = self.encoder()?.forward(&mut s, encoder_input)?;
        Ok(s.graph.value(h).clone())
    }

    /// Noise-free latent used at evaluation: per-layer argmax one-hot, or
    /// sigmoids for sfNRI.
    pub fn infer_z(&self, encoder_input: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, Mode::Eval);
        let h = self.encoder()?.forward(&mut s, encoder_input)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let z = latent(&mut s.graph, h, &self.config.scheme, Latent::Deterministic, &mut unused)?;
        Ok(s.graph.value(z).clone())
    }

    /// Saves parameters with the model config and any extra metadata.
    pub fn save(&self, path: &Path, extra: &Value) -> Result<()> {
        let header = json!({ "model": self.config, "extra": extra });
        self.store.write_checkpoint(path, &header)
    }

    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let (loaded, header) = ParameterStore::read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone()).map_err(|e| Error::Format {
            offset: 4,
            reason: format!("bad model config: {e}"),
        })?;
        let mut model = Model::new(config)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Format {
                offset: 4,
                reason: format!(
                    "checkpoint holds {} parameters, model expects {}",
                    loaded.len(),
                    model.store.len()
                ),
            });
        }
        for (_, p) in loaded.iter() {
            let id = model.store.id(&p.name).ok_or_else(|| Error::Format {
                offset: 4,
                reason: format!("unexpected parameter {}", p.name),
            })?;
            let slot = model.store.value_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint load", slot.shape(), p.value.shape()));
            }
            *slot = p.value.clone();
        }
        Ok((model, header["extra"].clone()))
    }
}
