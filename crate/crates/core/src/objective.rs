//! Training objectives. Every loss here is a sum over pairs and steps of one
//! batch; callers divide by the batch size.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scheme::{FactorisationScheme, Variant};
use crate::tensor::Tensor;

/// `Σ_k q_k log(q_k K)` for one explicit distribution, with `0 log 0 = 0`.
pub fn kl_uniform_probs(q: &[f64]) -> f64 {
    let k = q.len() as f64;
    q.iter().filter(|&&p| p > 0.0).map(|&p| p * (p * k).ln()).sum()
}

/// KL from the softmax posterior of one layer's logits to the uniform
/// prior, summed over rows.
pub fn kl_uniform(g: &mut Graph, logits: Var) -> Result<Var> {
    let (rows, k) = {
        let v = g.value(logits);
        (v.rows(), v.cols())
    };
    let q = g.softmax(logits);
    let log_q = g.log_softmax(logits);
    let neg_entropy = g.mul(q, log_q)?;
    let neg_entropy = g.sum(neg_entropy);
    let log_k = g.input(Tensor::scalar(rows as f64 * (k as f64).ln()));
    g.add(neg_entropy, log_k)
}

/// Sum of per-layer KL terms.
pub fn kl_factorised(g: &mut Graph, segments: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &seg in segments {
        let kl = kl_uniform(g, seg)?;
        total = Some(match total {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    total.ok_or_else(|| Error::Contract("no layers".into()))
}

/// Negated ELBO up to constants.
pub fn elbo_loss(g: &mut Graph, recon_nll: Var, kl: Var) -> Result<Var> {
    g.add(recon_nll, kl)
}

/// Reconstruction plus `l2 · Σ‖W‖²` over the given weights.
pub fn sfnri_loss(g: &mut Graph, recon_nll: Var, weights: &[Var], l2: f64) -> Result<Var> {
    if l2 == 0.0 || weights.is_empty() {
        return Ok(recon_nll);
    }
    let mut penalty: Option<Var> = None;
    for &w in weights {
        let sq = g.sum_squares(w);
        penalty = Some(match penalty {
            Some(acc) => g.add(acc, sq)?,
            None => sq,
        });
    }
    let penalty = g.scale(penalty.expect("non-empty"), l2);
    g.add(recon_nll, penalty)
}

/// Cross-entropy against ground-truth classes: categorical per layer for
/// NRI/fNRI, binary per unit for sfNRI. `targets` is `[rows, layers]`.
pub fn supervised_loss(g: &mut Graph, logits: Var, targets: &[usize], scheme: &FactorisationScheme) -> Result<Var> {
    let rows = g.value(logits).rows();
    let layers = scheme.num_layers();
    if targets.len() != rows * layers {
        return Err(Error::shape("supervised_loss", &[rows, layers], &[targets.len()]));
    }
    if scheme.variant == Variant::Sfnri {
        let y = Tensor::new(&[rows, layers], targets.iter().map(|&t| t as f64).collect())?;
        let y = g.input(y);
        let sp = g.softplus(logits);
        let yh = g.mul(y, logits)?;
        let bce = g.sub(sp, yh)?;
        return Ok(g.sum(bce));
    }
    let segments = crate::encoder::segment_logits(g, logits, scheme)?;
    let mut total: Option<Var> = None;
    for (a, (&seg, &k)) in segments.iter().zip(&scheme.layer_sizes).enumerate() {
        let mut one_hot = Tensor::zeros(&[rows, k]);
        for r in 0..rows {
            let t = targets[r * layers + a];
            if t >= k {
                return Err(Error::SchemeMismatch(format!("target class {t} for a layer of {k} types")));
            }
            one_hot.data_mut()[r * k + t] = 1.0;
        }
        let y = g.input(one_hot);
        let log_p = g.log_softmax(seg);
        let picked = g.mul(y, log_p)?;
        let picked = g.sum(picked);
        let ce = g.scale(picked, -1.0);
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::Contract("no layers".into()))
}
