//! Training loops for the three modes, per-epoch validation, best-model
//! checkpointing and the JSON-lines metrics log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Mode, ParamKind, Session, Var};
use crate::dataset::{epoch_order, split_halves, Batch, Dataset};
use crate::decoder::{gaussian_nll, sq_error};
use crate::encoder::{latent, segment_logits, Latent};
use crate::error::{Error, Result};
use crate::eval::{discretize, edge_accuracy};
use crate::model::{Model, TrainMode};
use crate::objective::{elbo_loss, kl_factorised, sfnri_loss, supervised_loss};
use crate::optim::{lr_at, Adam};
use crate::scheme::{batch_pair_labels, Variant};
use crate::sim::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Dropout on encoder hidden layers, supervised mode only.
    pub dropout: f64,
    /// L2 coefficient on weights, sfNRI only.
    pub l2: f64,
    /// Seeds batch order, sampling noise and dropout.
    pub seed: u64,
    pub valid_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 128,
            lr: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 200,
            dropout: 0.5,
            l2: 0.0,
            seed: 0,
            valid_batch_size: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.valid_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recon_10: Option<f64>,
    pub val_edge_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Validation MSE with the training teacher-forcing schedule; lower is
    /// better.
    ValRecon10step,
    /// Validation combined edge accuracy; higher is better.
    ValEdgeAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointCriterion {
    pub metric: Metric,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl CheckpointCriterion {
    pub fn for_mode(mode: TrainMode) -> Self {
        Self {
            metric: match mode {
                TrainMode::Supervised => Metric::ValEdgeAccuracy,
                _ => Metric::ValRecon10step,
            },
            best: None,
            best_epoch: None,
        }
    }

    /// Records `value` and reports whether it is a strict improvement.
    pub fn update(&mut self, value: f64, epoch: usize) -> bool {
        let better = match (self.best, self.metric) {
            (None, _) => true,
            (Some(b), Metric::ValRecon10step) => value < b,
            (Some(b), Metric::ValEdgeAccuracy) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
        }
        better
    }

    fn pick(&self, record: &EpochRecord) -> Option<f64> {
        match self.metric {
            Metric::ValRecon10step => record.val_recon_10,
            Metric::ValEdgeAccuracy => record.val_edge_acc,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub criterion: CheckpointCriterion,
}

/// Batch loss `(1/B)·Σ_examples` of the mode's objective, plus the weight
/// penalty when configured.
pub fn batch_loss(model: &Model, s: &mut Session, batch: &Batch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (first, second) = split_halves(&batch.trajectories)?;
    let inv_b = 1.0 / batch.size() as f64;
    let mc = &model.config;
    let sfnri = mc.scheme.variant == Variant::Sfnri;
    let loss = match mc.mode {
        TrainMode::Learned => {
            let logits = model.encoder()?.forward(s, &first)?;
            let how = Latent::Sample {
                tau: mc.tau,
                hard: mc.hard_sample,
            };
            let z = latent(&mut s.graph, logits, &mc.scheme, how, rng)?;
            let preds = model.decoder()?.rollout_teacher_forced(s, &second, z, mc.teacher_forcing)?;
            let nll = gaussian_nll(&mut s.graph, &preds, &second, mc.sigma2)?;
            if sfnri {
                s.graph.scale(nll, inv_b)
            } else {
                let segments = segment_logits(&mut s.graph, logits, &mc.scheme)?;
                let kl = kl_factorised(&mut s.graph, &segments)?;
                let elbo = elbo_loss(&mut s.graph, nll, kl)?;
                s.graph.scale(elbo, inv_b)
            }
        }
        TrainMode::Supervised => {
            let logits = model.encoder()?.forward(s, &first)?;
            let targets = supervised_targets(model, batch)?;
            let ce = supervised_loss(&mut s.graph, logits, &targets, &mc.scheme)?;
            s.graph.scale(ce, inv_b)
        }
        TrainMode::Truegraph => {
            let z = mc.scheme.truth_z(&batch_pair_labels(batch), batch.num_layers)?;
            let z = s.graph.input(z);
            let preds = model.decoder()?.rollout_teacher_forced(s, &second, z, mc.teacher_forcing)?;
            let nll = gaussian_nll(&mut s.graph, &preds, &second, mc.sigma2)?;
            s.graph.scale(nll, inv_b)
        }
    };
    if sfnri && cfg.l2 > 0.0 {
        let weights: Vec<Var> = model
            .store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Weight)
            .map(|(id, _)| id)
            .collect::<Vec<_>>()
            .into_iter()
            .map(|id| s.param(id))
            .collect();
        return sfnri_loss(&mut s.graph, loss, &weights, cfg.l2);
    }
    Ok(loss)
}

fn supervised_targets(model: &Model, batch: &Batch) -> Result<Vec<usize>> {
    let truth = batch_pair_labels(batch);
    let mut out = Vec::with_capacity(truth.len());
    for row in truth.chunks_exact(batch.num_layers) {
        out.extend(model.config.scheme.truth_codes(row)?);
    }
    Ok(out)
}

/// Validation: teacher-forced MSE with argmax latents (or the true graph),
/// and permutation-matched combined edge accuracy.
pub fn validate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(Option<f64>, Option<f64>)> {
    let mc = &model.config;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for idx in (0..data.len()).collect::<Vec<_>>().chunks(batch_size) {
        let batch = data.batch(idx);
        let (first, second) = split_halves(&batch.trajectories)?;
        let mut s = Session::new(&model.store, Mode::Eval);
        let z = if let Some(enc) = &model.encoder {
            let logits = enc.forward(&mut s, &first)?;
            let z = latent(&mut s.graph, logits, &mc.scheme, Latent::Deterministic, &mut unused)?;
            pred.extend(discretize(s.graph.value(z), &mc.scheme));
            truth.extend(batch_pair_labels(&batch));
            z
        } else {
            let z = mc.scheme.truth_z(&batch_pair_labels(&batch), batch.num_layers)?;
            s.graph.input(z)
        };
        if let Some(dec) = &model.decoder {
            let preds = dec.rollout_teacher_forced(&mut s, &second, z, mc.teacher_forcing)?;
            let e = sq_error(&mut s.graph, &preds, &second)?;
            sq += s.graph.value(e).item()?;
            count += preds.len() * preds.first().map_or(0, |p| s.graph.value(*p).len());
        }
    }
    let recon = model.decoder.is_some().then(|| sq / count as f64);
    let acc = if model.encoder.is_some() {
        Some(edge_accuracy(&pred, &truth, data.num_layers(), &mc.scheme)?.combined)
    } else {
        None
    };
    Ok((recon, acc))
}

/// Trains on normalized `train`, validating on `valid` every epoch. The best
/// model under the mode's criterion is written to `ckpt`; one JSON line per
/// epoch goes to `log`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &Dataset,
    valid: &Dataset,
    ckpt: Option<&Path>,
    log: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.header.t_record % 2 != 0 {
        return Err(Error::Contract("training needs an even trajectory length".into()));
    }
    let mut log = log.map(File::create).transpose()?.map(BufWriter::new);
    let mut adam = Adam::new(&model.store);
    let mut criterion = CheckpointCriterion::for_mode(model.config.mode);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_every);
        let order = epoch_order(train.len(), Some(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size.min(train.len())).enumerate() {
            let batch = train.batch(idx);
            let stream = derive_seed(cfg.seed, ((epoch as u64) << 32) | bi as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let dropout = if model.config.mode == TrainMode::Supervised {
                cfg.dropout
            } else {
                0.0
            };
            let mut s = Session::new(&model.store, Mode::Train).with_dropout(dropout, stream ^ 0x5bd1_e995);
            let loss = batch_loss(model, &mut s, &batch, cfg, &mut rng)?;
            let value = s.graph.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at epoch {epoch}, batch {bi}")));
            }
            let (graph, pending) = s.into_parts();
            model.store.zero_grad();
            graph.backward(loss, Some(&mut model.store))?;
            drop(graph);
            pending.apply(&mut model.store);
            adam.step(&mut model.store, lr);
            total += value;
            batches += 1;
        }
        let (val_recon_10, val_edge_acc) = validate(model, valid, cfg.valid_batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_recon_10,
            val_edge_acc,
            lr,
        };
        if let Some(v) = criterion.pick(&record) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation metric at epoch {epoch}")));
            }
            if criterion.update(v, epoch) {
                if let Some(path) = ckpt {
                    model.save(path, &json!({ "epoch": epoch, "criterion": criterion, "train": cfg }))?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        records.push(record);
    }
    Ok(TrainSummary { records, criterion })
}

/// Convenience for reading a metrics log back.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn checkpoint_extra(extra: &Value) -> Option<usize> {
    extra.get("epoch").and_then(Value::as_u64).map(|e| e as usize)
}
