//! Permutation-matched edge accuracy, trajectory prediction error and the
//! static and random baselines.
//!
//! Inferred edge types carry no fixed meaning, so predictions are matched to
//! the ground-truth interaction types by the single map that maximises
//! combined accuracy over the whole evaluation set. Maps are searched
//! exhaustively in lexicographic order and the first maximiser wins.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Session};
use crate::dataset::{split_halves, Batch, Dataset};
use crate::decoder::time_slice;
use crate::encoder::argmax;
use crate::error::{Error, Result};
use crate::model::{Model, TrainMode};
use crate::scheme::{batch_pair_labels, FactorisationScheme, Variant};
use crate::tensor::Tensor;

/// Hard per-layer labels `[rows, layers]` from latent vectors `[rows, K]`:
/// argmax per segment (ties to the lowest index), or `z > 0.5` for sfNRI.
pub fn discretize(z: &Tensor, scheme: &FactorisationScheme) -> Vec<usize> {
    let segments = scheme.segments();
    let mut out = Vec::with_capacity(z.rows() * segments.len());
    for r in 0..z.rows() {
        let row = z.row(r);
        for &(start, len) in &segments {
            out.push(match scheme.variant {
                Variant::Sfnri => usize::from(row[start] > 0.5),
                _ => argmax(&row[start..start + len]),
            });
        }
    }
    out
}

/// How predicted labels are read as ground-truth interaction types.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PermutationMap {
    /// Predicted layer `a` stands for truth layer `layer_assignment[a]`,
    /// with its label `l` read as truth label `label_permutations[a][l]`.
    Factorised {
        layer_assignment: Vec<usize>,
        label_permutations: Vec<Vec<usize>>,
    },
    /// A single predicted layer whose label `l` is read as the truth joint
    /// code `codes[l]` (bit `b` is truth layer `b`).
    Joint { codes: Vec<usize> },
}

impl std::fmt::Display for PermutationMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PermutationMap::Factorised {
                layer_assignment,
                label_permutations,
            } => write!(f, "layers{layer_assignment:?} labels{label_permutations:?}"),
            PermutationMap::Joint { codes } => write!(f, "joint{codes:?}"),
        }
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Candidate maps for one scheme against `truth_layers` binary layers, each
/// tabulated as predicted joint code → truth joint code.
#[derive(Clone, Debug)]
pub struct Matcher {
    label_counts: Vec<usize>,
    truth_layers: usize,
    candidates: Vec<(PermutationMap, Vec<usize>)>,
}

impl Matcher {
    pub fn new(scheme: &FactorisationScheme, truth_layers: usize) -> Result<Self> {
        let label_counts = scheme.label_counts();
        let n = label_counts.len();
        let pred_codes: usize = label_counts.iter().product();
        let mut candidates = Vec::new();
        if n == truth_layers && label_counts.iter().all(|&k| k == 2) {
            let label_perms = permutations(2);
            for sigma in permutations(n) {
                for choice in 0..label_perms.len().pow(n as u32) {
                    let perms: Vec<Vec<usize>> = (0..n)
                        .map(|a| label_perms[(choice / label_perms.len().pow((n - 1 - a) as u32)) % label_perms.len()].clone())
                        .collect();
                    let table = (0..pred_codes)
                        .map(|p| {
                            (0..n)
                                .map(|a| perms[a][(p >> a) & 1] << sigma[a])
                                .sum()
                        })
                        .collect();
                    candidates.push((
                        PermutationMap::Factorised {
                            layer_assignment: sigma.clone(),
                            label_permutations: perms,
                        },
                        table,
                    ));
                }
            }
        } else if n == 1 && label_counts[0] == 1 << truth_layers {
            for codes in permutations(label_counts[0]) {
                candidates.push((PermutationMap::Joint { codes: codes.clone() }, codes));
            }
        } else {
            return Err(Error::SchemeMismatch(format!(
                "cannot match {scheme} ({}) against {truth_layers} binary interaction types",
                scheme.variant
            )));
        }
        Ok(Self {
            label_counts,
            truth_layers,
            candidates,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    fn pred_code(&self, labels: &[usize]) -> usize {
        let mut code = 0;
        let mut radix = 1;
        for (&l, &k) in labels.iter().zip(&self.label_counts) {
            code += l * radix;
            radix *= k;
        }
        code
    }

    fn truth_code(truth: &[u8]) -> usize {
        truth.iter().enumerate().map(|(b, &l)| usize::from(l) << b).sum()
    }

    /// Joint confusion counts `[pred code][truth code]`.
    pub fn confusion(&self, pred: &[usize], truth: &[u8]) -> Result<Vec<Vec<u64>>> {
        let n = self.label_counts.len();
        let rows = pred.len() / n;
        if pred.len() != rows * n || truth.len() != rows * self.truth_layers {
            return Err(Error::shape("edge_accuracy", &[pred.len(), n], &[truth.len(), self.truth_layers]));
        }
        let pred_codes: usize = self.label_counts.iter().product();
        let mut c = vec![vec![0u64; 1 << self.truth_layers]; pred_codes];
        for (p, t) in pred.chunks_exact(n).zip(truth.chunks_exact(self.truth_layers)) {
            if let Some((l, k)) = p.iter().zip(&self.label_counts).find(|(l, k)| l >= k) {
                return Err(Error::SchemeMismatch(format!("label {l} in a layer of {k} types")));
            }
            c[self.pred_code(p)][Self::truth_code(t)] += 1;
        }
        Ok(c)
    }

    fn combined_count(confusion: &[Vec<u64>], table: &[usize]) -> u64 {
        confusion.iter().zip(table).map(|(row, &t)| row[t]).sum()
    }

    /// Index of the first candidate with the highest combined count.
    pub fn best(&self, confusion: &[Vec<u64>]) -> usize {
        let mut best = (0, 0);
        for (i, (_, table)) in self.candidates.iter().enumerate() {
            let c = Self::combined_count(confusion, table);
            if i == 0 || c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }

    /// Accuracy under candidate `index`.
    pub fn score(&self, confusion: &[Vec<u64>], index: usize) -> EdgeAccuracy {
        let table = &self.candidates[index].1;
        let total: u64 = confusion.iter().flatten().sum();
        let mut per_type = vec![0u64; self.truth_layers];
        for (row, &mapped) in confusion.iter().zip(table) {
            for (t, &count) in row.iter().enumerate() {
                for (b, hits) in per_type.iter_mut().enumerate() {
                    if (mapped >> b) & 1 == (t >> b) & 1 {
                        *hits += count;
                    }
                }
            }
        }
        let frac = |c: u64| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        EdgeAccuracy {
            per_type: per_type.into_iter().map(frac).collect(),
            combined: frac(Self::combined_count(confusion, table)),
            map: self.candidates[index].0.clone(),
            pairs: total as usize,
        }
    }

    /// Whether one pair is correct in every layer under candidate `index`.
    pub fn pair_correct(&self, pred: &[usize], truth: &[u8], index: usize) -> bool {
        self.candidates[index].1[self.pred_code(pred)] == Self::truth_code(truth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAccuracy {
    /// One entry per ground-truth interaction layer.
    pub per_type: Vec<f64>,
    /// Fraction of pairs correct in every layer at once.
    pub combined: f64,
    pub map: PermutationMap,
    pub pairs: usize,
}

/// Accuracy of per-layer labels `pred` `[rows, layers]` against binary truth
/// `[rows, truth_layers]` under the best global map.
pub fn edge_accuracy(pred: &[usize], truth: &[u8], truth_layers: usize, scheme: &FactorisationScheme) -> Result<EdgeAccuracy> {
    let matcher = Matcher::new(scheme, truth_layers)?;
    let c = matcher.confusion(pred, truth)?;
    Ok(matcher.score(&c, matcher.best(&c)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub map: String,
    pub batches: usize,
}

/// Tally of the best map chosen independently on each chunk of
/// `rows_per_batch` pairs, most frequent first.
pub fn permutation_consistency(
    pred: &[usize],
    truth: &[u8],
    truth_layers: usize,
    scheme: &FactorisationScheme,
    rows_per_batch: usize,
) -> Result<Vec<HistogramBin>> {
    let matcher = Matcher::new(scheme, truth_layers)?;
    let n = scheme.num_layers();
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    let rows_per_batch = rows_per_batch.max(1);
    for (p, t) in pred
        .chunks(rows_per_batch * n)
        .zip(truth.chunks(rows_per_batch * truth_layers))
    {
        let c = matcher.confusion(p, t)?;
        let best = matcher.best(&c);
        *tally.entry(matcher.candidates[best].0.to_string()).or_default() += 1;
    }
    let mut bins: Vec<HistogramBin> = tally
        .into_iter()
        .map(|(map, batches)| HistogramBin { map, batches })
        .collect();
    bins.sort_by(|a, b| b.batches.cmp(&a.batches).then_with(|| a.map.cmp(&b.map)));
    Ok(bins)
}

/// Uniformly random labels for `rows` pairs.
pub fn random_predictions<R: Rng + ?Sized>(rows: usize, scheme: &FactorisationScheme, rng: &mut R) -> Vec<usize> {
    let counts = scheme.label_counts();
    (0..rows)
        .flat_map(|_| counts.iter().map(|&k| rng.random_range(0..k)).collect::<Vec<_>>())
        .collect()
}

/// Predicted labels and truth labels for every pair of `data`, plus the
/// number of pairs per example.
pub struct EdgePredictions {
    pub pred: Vec<usize>,
    pub truth: Vec<u8>,
    pub truth_layers: usize,
    pub pairs_per_example: usize,
}

pub fn predict_edges(model: &Model, data: &Dataset, batch_size: usize) -> Result<EdgePredictions> {
    let n = data.header.n_particles;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for idx in (0..data.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let batch = data.batch(idx);
        let (first, _) = split_halves(&batch.trajectories)?;
        let z = model.infer_z(&first)?;
        pred.extend(discretize(&z, &model.config.scheme));
        truth.extend(batch_pair_labels(&batch));
    }
    Ok(EdgePredictions {
        pred,
        truth,
        truth_layers: data.num_layers(),
        pairs_per_example: n * (n - 1),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseMode {
    /// Error at exactly step k.
    #[default]
    At,
    /// Error averaged over steps 1..=k.
    Cum,
}

impl std::str::FromStr for MseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at" => Ok(MseMode::At),
            "cum" => Ok(MseMode::Cum),
            other => Err(Error::Config(format!("unknown mse mode {other:?} (expected at or cum)"))),
        }
    }
}

fn reduce(per_step: &[f64], steps: &[usize], mode: MseMode) -> Vec<f64> {
    steps
        .iter()
        .map(|&k| match mode {
            MseMode::At => per_step[k - 1],
            MseMode::Cum => per_step[..k].iter().sum::<f64>() / k as f64,
        })
        .collect()
}

fn check_steps(data: &Dataset, steps: &[usize]) -> Result<usize> {
    let max = steps.iter().copied().max().unwrap_or(0);
    let half = data.header.t_record / 2;
    if steps.contains(&0) || max == 0 || half + max > data.header.t_record - 1 {
        return Err(Error::Config(format!(
            "prediction steps {steps:?} must lie in 1..={}",
            data.header.t_record - 1 - half
        )));
    }
    Ok(max)
}

/// Free rollout of `steps` predictions from the first state of the second
/// half of every example in `batch`, conditioned on the inferred graph (or
/// the true graph for true-graph models). Element `k` has shape `[B, N, D]`.
pub fn rollout_batch(model: &Model, batch: &Batch, steps: usize) -> Result<Vec<Tensor>> {
    let decoder = model.decoder()?;
    let (first, second) = split_halves(&batch.trajectories)?;
    let z = match model.config.mode {
        TrainMode::Truegraph => model
            .config
            .scheme
            .truth_z(&batch_pair_labels(batch), batch.num_layers)?,
        _ => model.infer_z(&first)?,
    };
    let shape = second.shape().to_vec();
    let (b, n, d) = (shape[0], shape[2], shape[3]);
    let x1 = time_slice(&second, 0).reshape(&[b, n, d])?;
    let mut s = Session::new(&model.store, Mode::Eval);
    let zv = s.graph.input(z);
    let preds = decoder.rollout_free(&mut s, &x1, zv, steps)?;
    Ok(preds.into_iter().map(|mu| s.graph.value(mu).clone()).collect())
}

/// Mean squared error per step `1..=max_steps` of a free rollout started
/// from the first state of the second half of each example, averaged over
/// particles, dimensions and examples.
pub fn rollout_errors(model: &Model, data: &Dataset, max_steps: usize, batch_size: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; max_steps];
    for idx in (0..data.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let batch = data.batch(idx);
        let (_, second) = split_halves(&batch.trajectories)?;
        for (k, mu) in rollout_batch(model, &batch, max_steps)?.iter().enumerate() {
            let target = time_slice(&second, k + 1);
            sums[k] += mu
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    let denom = (data.len() * data.header.n_particles * data.header.dims) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

pub fn trajectory_mse(model: &Model, data: &Dataset, steps: &[usize], mode: MseMode, batch_size: usize) -> Result<Vec<f64>> {
    let max = check_steps(data, steps)?;
    Ok(reduce(&rollout_errors(model, data, max, batch_size)?, steps, mode))
}

/// Predicts that nothing moves.
pub fn static_baseline(x: &Tensor) -> Tensor {
    x.clone()
}

/// Error of the static baseline under the same protocol as
/// [`trajectory_mse`].
pub fn static_mse(data: &Dataset, steps: &[usize], mode: MseMode) -> Result<Vec<f64>> {
    let max = check_steps(data, steps)?;
    let h = &data.header;
    let half = h.t_record / 2;
    let step = h.n_particles * h.dims;
    let mut sums = vec![0.0; max];
    for e in 0..data.len() {
        let traj = data.trajectory(e);
        let start = static_baseline(&Tensor::new(&[step], traj[half * step..(half + 1) * step].to_vec())?);
        for (k, sum) in sums.iter_mut().enumerate() {
            let at = (half + k + 1) * step;
            *sum += traj[at..at + step]
                .iter()
                .zip(start.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    let denom = (data.len() * step) as f64;
    let per_step: Vec<f64> = sums.into_iter().map(|s| s / denom).collect();
    Ok(reduce(&per_step, steps, mode))
}

/// Displayed MSE values are in units of 1e-5.
pub const MSE_DISPLAY_SCALE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub scheme: Option<String>,
    pub num_examples: usize,
    pub layer_names: Vec<String>,
    pub combined_accuracy: Option<f64>,
    pub per_type_accuracy: Option<Vec<f64>>,
    pub permutation: Option<PermutationMap>,
    pub permutation_histogram: Option<Vec<HistogramBin>>,
    pub mse_mode: MseMode,
    pub mse_steps: Vec<usize>,
    /// Normalized units.
    pub mse: Vec<f64>,
    /// `mse / 1e-5`.
    pub mse_display: Vec<f64>,
}

impl EvalReport {
    pub fn empty(model: String, data: &Dataset, steps: &[usize], mode: MseMode) -> Self {
        Self {
            model,
            scheme: None,
            num_examples: data.len(),
            layer_names: data.header.layers.iter().map(|l| l.name.clone()).collect(),
            combined_accuracy: None,
            per_type_accuracy: None,
            permutation: None,
            permutation_histogram: None,
            mse_mode: mode,
            mse_steps: steps.to_vec(),
            mse: Vec::new(),
            mse_display: Vec::new(),
        }
    }

    pub fn set_accuracy(&mut self, acc: &EdgeAccuracy) {
        self.combined_accuracy = Some(acc.combined);
        self.per_type_accuracy = Some(acc.per_type.clone());
        self.permutation = Some(acc.map.clone());
    }

    pub fn set_mse(&mut self, mse: Vec<f64>) {
        self.mse_display = mse.iter().map(|m| m / MSE_DISPLAY_SCALE).collect();
        self.mse = mse;
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub steps: Vec<usize>,
    pub mse_mode: MseMode,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: vec![1, 10, 20],
            mse_mode: MseMode::At,
            batch_size: 100,
        }
    }
}

/// Edge accuracy (when the model has an encoder) and trajectory MSE (when
/// it has a decoder) on a normalized dataset. Also returns per-example
/// combined accuracy under the global map.
pub fn evaluate(model: &Model, data: &Dataset, opts: &EvalOptions) -> Result<(EvalReport, Vec<f64>)> {
    let name = format!("{}-{}", model.config.scheme.variant, serde_json::to_value(model.config.mode)?.as_str().unwrap_or(""));
    let mut report = EvalReport::empty(name, data, &opts.steps, opts.mse_mode);
    report.scheme = Some(model.config.scheme.to_string());
    let mut per_example = Vec::new();
    if model.encoder.is_some() {
        let edges = predict_edges(model, data, opts.batch_size)?;
        let matcher = Matcher::new(&model.config.scheme, edges.truth_layers)?;
        let c = matcher.confusion(&edges.pred, &edges.truth)?;
        let best = matcher.best(&c);
        report.set_accuracy(&matcher.score(&c, best));
        report.permutation_histogram = Some(permutation_consistency(
            &edges.pred,
            &edges.truth,
            edges.truth_layers,
            &model.config.scheme,
            opts.batch_size * edges.pairs_per_example,
        )?);
        let n = model.config.scheme.num_layers();
        let pp = edges.pairs_per_example;
        for (p, t) in edges
            .pred
            .chunks(pp * n)
            .zip(edges.truth.chunks(pp * edges.truth_layers))
        {
            let hits = p
                .chunks(n)
                .zip(t.chunks(edges.truth_layers))
                .filter(|(p, t)| matcher.pair_correct(p, t, best))
                .count();
            per_example.push(hits as f64 / pp as f64);
        }
    }
    if model.decoder.is_some() {
        report.set_mse(trajectory_mse(model, data, &opts.steps, opts.mse_mode, opts.batch_size)?);
    }
    Ok((report, per_example))
}
