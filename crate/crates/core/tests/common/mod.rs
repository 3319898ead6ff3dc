//! Central finite-difference gradient oracle shared by the integration
//! tests. It only evaluates forward values, never the backward rules it
//! checks.
#![allow(dead_code)]

use fnri::autodiff::{Graph, ParamId, ParameterStore, Var};
use fnri::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `‖analytic − numeric‖₂ / max(‖numeric‖₂, ‖analytic‖₂, 1e-6)`; the floor
/// turns the check absolute for gradients that vanish identically.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares backward gradients for every input of `build` against finite
/// differences; returns the worst relative error.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss, None).unwrap();

    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = numeric_grad(&inputs[k], |probe| {
            let mut values = inputs.to_vec();
            values[k] = probe.clone();
            eval(&values)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same as [`check_inputs`] but over the trainable entries of a parameter
/// store. `loss` builds a fresh forward pass and returns (graph, loss).
pub fn check_params(
    store: &ParameterStore,
    ids: &[ParamId],
    loss: impl Fn(&ParameterStore) -> (Graph, Var),
) -> f64 {
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    let (g, l) = loss(store);
    g.backward(l, Some(&mut with_grads)).unwrap();

    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = with_grads.grad(id).data().to_vec();
        let numeric = numeric_grad(store.value(id), |probe| {
            let mut s = store.clone();
            *s.value_mut(id) = probe.clone();
            let (g, l) = loss(&s);
            g.value(l).item().unwrap()
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}
