//! Decoder message passing, residual update and rollout schedules.

mod common;

use fnri::autodiff::{Activation, Graph, Mode, Session, Var};
use fnri::decoder::{gaussian_nll, time_slice};
use fnri::encoder::PairIndex;
use fnri::model::{Model, ModelConfig, TrainMode};
use fnri::scheme::{ordered_pairs, FactorisationScheme, Variant};
use fnri::{Error, Tensor};
use proptest::prelude::*;

const N: usize = 4;

fn decoder_model(scheme: FactorisationScheme) -> Model {
    let mut cfg = ModelConfig::new(scheme, TrainMode::Truegraph);
    cfg.n_particles = N;
    cfg.hidden = 8;
    cfg.init_seed = 5;
    let mut model = Model::new(cfg).unwrap();
    randomize_output_layer(&mut model, 5);
    model
}

/// The output layer starts at zero; give it weights so messages show.
fn randomize_output_layer(model: &mut Model, seed: u64) {
    let id = model.store.id("dec.out.fc3.weight").unwrap();
    let shape = model.store.value(id).shape().to_vec();
    *model.store.value_mut(id) = common::random_tensor(&shape, seed);
}

#[test]
fn untrained_decoder_is_static() {
    let model = Model::new({
        let mut cfg = ModelConfig::new(FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap(), TrainMode::Learned);
        cfg.n_particles = N;
        cfg.hidden = 8;
        cfg
    })
    .unwrap();
    let x = common::random_tensor(&[N, 4], 30);
    let z = uniform_z(N * (N - 1), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(decoder_step(&model, &x, &z), x);
}

fn uniform_z(rows: usize, z: &[f64]) -> Tensor {
    Tensor::from_fn(&[rows, z.len()], |i| z[i % z.len()])
}

/// `μ_j = x_j + f_v([Σ_i msg_(i,j), x_j])` built from the public pieces.
fn manual_step(model: &Model, x: &Tensor, message: impl Fn(&mut Session, Var) -> Var) -> Tensor {
    let mut s = Session::new(&model.store, Mode::Eval);
    let pairs = PairIndex::new(1, N);
    let xv = s.graph.input(x.clone());
    let send = s.graph.gather_rows(xv, pairs.senders.clone()).unwrap();
    let recv = s.graph.gather_rows(xv, pairs.receivers.clone()).unwrap();
    let pre = s.graph.concat_cols(&[send, recv]).unwrap();
    let msg = message(&mut s, pre);
    let agg = s.graph.scatter_add_rows(msg, pairs.receivers.clone(), N).unwrap();
    let mut h = s.graph.concat_cols(&[agg, xv]).unwrap();
    for (k, act) in [(1, Activation::Elu), (2, Activation::Elu), (3, Activation::Identity)] {
        let w = s.param(model.store.id(&format!("dec.out.fc{k}.weight")).unwrap());
        let b = s.param(model.store.id(&format!("dec.out.fc{k}.bias")).unwrap());
        h = s.graph.dense(h, w, Some(b), act).unwrap();
    }
    let mu = s.graph.add(xv, h).unwrap();
    s.graph.value(mu).clone()
}

fn decoder_step(model: &Model, x: &Tensor, z: &Tensor) -> Tensor {
    let mut s = Session::new(&model.store, Mode::Eval);
    let xv = s.graph.input(x.clone());
    let zv = s.graph.input(z.clone());
    let mu = model.decoder().unwrap().step(&mut s, xv, zv, &PairIndex::new(1, N)).unwrap();
    s.graph.value(mu).clone()
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() <= tol, "{u} vs {v}");
    }
}

#[test]
fn one_hot_latent_selects_one_message_function() {
    let scheme = FactorisationScheme::new(Variant::Nri, &[3]).unwrap();
    let model = decoder_model(scheme);
    assert_eq!(model.decoder().unwrap().num_edge_functions(), 2);
    let x = common::random_tensor(&[N, 4], 1);
    let rows = N * (N - 1);
    for k in [1, 2] {
        let mut z = vec![0.0; 3];
        z[k] = 1.0;
        let got = decoder_step(&model, &x, &uniform_z(rows, &z));
        let want = manual_step(&model, &x, |s, pre| model.decoder().unwrap().edge_message(s, pre, k).unwrap().unwrap());
        assert_close(&got, &want, 1e-12);
    }
}

#[test]
fn soft_latent_averages_message_functions() {
    let scheme = FactorisationScheme::with_non_edge(Variant::Nri, &[2], false).unwrap();
    let model = decoder_model(scheme);
    let x = common::random_tensor(&[N, 4], 2);
    let got = decoder_step(&model, &x, &uniform_z(N * (N - 1), &[0.5, 0.5]));
    let want = manual_step(&model, &x, |s, pre| {
        let dec = model.decoder().unwrap();
        let a = dec.edge_message(s, pre, 0).unwrap().unwrap();
        let b = dec.edge_message(s, pre, 1).unwrap().unwrap();
        let sum = s.graph.add(a, b).unwrap();
        s.graph.scale(sum, 0.5)
    });
    assert_close(&got, &want, 1e-12);
}

#[test]
fn non_edge_type_sends_no_message() {
    let scheme = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    let model = decoder_model(scheme);
    let dec = model.decoder().unwrap();
    assert_eq!(dec.num_edge_functions(), 2);
    let mut s = Session::new(&model.store, Mode::Eval);
    let pre = s.graph.input(Tensor::zeros(&[1, 8]));
    assert!(dec.edge_message(&mut s, pre, 0).unwrap().is_none());
    assert!(dec.edge_message(&mut s, pre, 2).unwrap().is_none());

    let x = common::random_tensor(&[N, 4], 3);
    let got = decoder_step(&model, &x, &uniform_z(N * (N - 1), &[1.0, 0.0, 1.0, 0.0]));
    let want = manual_step(&model, &x, |s, _| s.graph.input(Tensor::zeros(&[N * (N - 1), 8])));
    assert_close(&got, &want, 1e-12);
}

#[test]
fn sfnri_with_zero_latent_ignores_other_particles() {
    let scheme = FactorisationScheme::new(Variant::Sfnri, &[2]).unwrap();
    let model = decoder_model(scheme);
    let z = Tensor::zeros(&[N * (N - 1), 2]);
    let x = common::random_tensor(&[N, 4], 4);
    let base = decoder_step(&model, &x, &z);
    for seed in 0..20 {
        let mut moved = common::random_tensor(&[N, 4], 100 + seed);
        let j = seed as usize % N;
        moved.data_mut()[j * 4..j * 4 + 4].copy_from_slice(&x.data()[j * 4..j * 4 + 4]);
        let after = decoder_step(&model, &moved, &z);
        for (a, b) in base.row(j).iter().zip(after.row(j)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sfnri_zero_latent_invariance(
        others in proptest::collection::vec(-10.0f64..10.0, 4 * N),
        j in 0usize..N,
    ) {
        let model = decoder_model(FactorisationScheme::new(Variant::Sfnri, &[3]).unwrap());
        let z = Tensor::zeros(&[N * (N - 1), 3]);
        let x = common::random_tensor(&[N, 4], 6);
        let mut moved = Tensor::new(&[N, 4], others).unwrap();
        moved.data_mut()[j * 4..j * 4 + 4].copy_from_slice(&x.data()[j * 4..j * 4 + 4]);
        let base = decoder_step(&model, &x, &z);
        let after = decoder_step(&model, &moved, &z);
        for (a, b) in base.row(j).iter().zip(after.row(j)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn interacting_latent_couples_particles() {
    let scheme = FactorisationScheme::new(Variant::Sfnri, &[2]).unwrap();
    let model = decoder_model(scheme);
    let z = uniform_z(N * (N - 1), &[1.0, 1.0]);
    let x = common::random_tensor(&[N, 4], 4);
    let mut moved = x.clone();
    moved.data_mut()[4] += 1.0;
    let (a, b) = (decoder_step(&model, &x, &z), decoder_step(&model, &moved, &z));
    assert_ne!(a.row(0), b.row(0));
}

/// Rollout step indices whose prediction equals a one-step prediction from
/// the true state, i.e. where truth was fed in.
fn injected_steps(model: &Model, truth: &Tensor, z: &Tensor, m: usize) -> Vec<usize> {
    let mut s = Session::new(&model.store, Mode::Eval);
    let zv = s.graph.input(z.clone());
    let preds = model.decoder().unwrap().rollout_teacher_forced(&mut s, truth, zv, m).unwrap();
    assert_eq!(preds.len(), truth.shape()[1] - 1);
    preds
        .iter()
        .enumerate()
        .filter(|(step, &p)| {
            let one = decoder_step(model, &time_slice(truth, *step), z);
            s.graph.value(p) == &one
        })
        .map(|(step, _)| step + 1)
        .collect()
}

#[test]
fn teacher_forcing_injects_truth_every_m_steps() {
    let scheme = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    let model = decoder_model(scheme);
    let truth = common::random_tensor(&[1, 50, N, 4], 8);
    let z = uniform_z(N * (N - 1), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(injected_steps(&model, &truth, &z, 10), vec![1, 11, 21, 31, 41]);
    assert_eq!(injected_steps(&model, &truth, &z, 1), (1..50).collect::<Vec<_>>());
    assert_eq!(injected_steps(&model, &truth, &z, 50), vec![1]);
    assert_eq!(injected_steps(&model, &truth, &z, 80), vec![1]);
}

#[test]
fn zero_period_is_rejected() {
    let model = decoder_model(FactorisationScheme::new(Variant::Nri, &[2]).unwrap());
    let mut s = Session::new(&model.store, Mode::Eval);
    let z = s.graph.input(Tensor::zeros(&[N * (N - 1), 2]));
    let truth = Tensor::zeros(&[1, 5, N, 4]);
    let err = model.decoder().unwrap().rollout_teacher_forced(&mut s, &truth, z, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn free_rollout(model: &Model, x1: &Tensor, z: &Tensor, steps: usize) -> Vec<Tensor> {
    let mut s = Session::new(&model.store, Mode::Eval);
    let zv = s.graph.input(z.clone());
    let preds = model.decoder().unwrap().rollout_free(&mut s, x1, zv, steps).unwrap();
    preds.iter().map(|&p| s.graph.value(p).clone()).collect()
}

#[test]
fn single_free_step_equals_decode_step() {
    let model = decoder_model(FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap());
    let x1 = common::random_tensor(&[1, N, 4], 9);
    let z = uniform_z(N * (N - 1), &[0.3, 0.7, 0.6, 0.4]);
    let free = free_rollout(&model, &x1, &z, 1);
    assert_eq!(free[0], decoder_step(&model, &x1.clone().reshape(&[N, 4]).unwrap(), &z));
    assert_eq!(free_rollout(&model, &x1, &z, 7), free_rollout(&model, &x1, &z, 7));
}

#[test]
fn zero_output_function_gives_static_dynamics() {
    let mut model = decoder_model(FactorisationScheme::new(Variant::Nri, &[4]).unwrap());
    for name in ["dec.out.fc3.weight", "dec.out.fc3.bias"] {
        let id = model.store.id(name).unwrap();
        model.store.value_mut(id).data_mut().fill(0.0);
    }
    let x1 = common::random_tensor(&[2, N, 4], 10);
    let mut s = Session::new(&model.store, Mode::Eval);
    let z = s.graph.input(uniform_z(2 * N * (N - 1), &[0.0, 1.0, 0.0, 0.0]));
    let preds = model.decoder().unwrap().rollout_free(&mut s, &x1, z, 20).unwrap();
    let flat = x1.reshape(&[2 * N, 4]).unwrap();
    for p in preds {
        assert_eq!(s.graph.value(p), &flat);
    }
}

#[test]
fn step_rejects_mismatched_latent() {
    let model = decoder_model(FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap());
    let mut s = Session::new(&model.store, Mode::Eval);
    let x = s.graph.input(Tensor::zeros(&[N, 4]));
    let z = s.graph.input(Tensor::zeros(&[N * (N - 1), 3]));
    let err = model.decoder().unwrap().step(&mut s, x, z, &PairIndex::new(1, N)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn gaussian_nll_examples() {
    let truth = common::random_tensor(&[1, 3, 2, 4], 11);
    let mut g = Graph::new();
    let exact: Vec<Var> = (1..3).map(|t| g.input(time_slice(&truth, t))).collect();
    let nll = gaussian_nll(&mut g, &exact, &truth, 5e-5).unwrap();
    assert_eq!(g.value(nll).item().unwrap(), 0.0);

    let mut off = time_slice(&truth, 2);
    off.data_mut()[5] += 0.01;
    let off = g.input(off);
    let nll = gaussian_nll(&mut g, &[exact[0], off], &truth, 5e-5).unwrap();
    assert!((g.value(nll).item().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn loss_gradient_reaches_the_latent() {
    let model = decoder_model(FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap());
    let truth = common::random_tensor(&[1, 6, N, 4], 12);
    let z0 = uniform_z(N * (N - 1), &[0.3, 0.7, 0.55, 0.45]);
    let loss_at = |z: &Tensor| {
        let mut s = Session::new(&model.store, Mode::Eval);
        let zv = s.graph.input(z.clone());
        let preds = model.decoder().unwrap().rollout_teacher_forced(&mut s, &truth, zv, 3).unwrap();
        let loss = gaussian_nll(&mut s.graph, &preds, &truth, 0.5).unwrap();
        (s, zv, loss)
    };
    let (s, zv, loss) = loss_at(&z0);
    let analytic = s.graph.backward(loss, None).unwrap().get(zv).unwrap().data().to_vec();
    let numeric = common::numeric_grad(&z0, |z| {
        let (s, _, loss) = loss_at(z);
        s.graph.value(loss).item().unwrap()
    });
    assert!(analytic.iter().any(|g| g.abs() > 1e-6));
    assert!(common::rel_err(&analytic, &numeric) < 1e-5);
}

#[test]
fn pair_layout_is_row_major_sender_first() {
    let pairs = PairIndex::new(2, 3);
    let expected: Vec<(usize, usize)> = ordered_pairs(3)
        .into_iter()
        .chain(ordered_pairs(3).into_iter().map(|(i, j)| (i + 3, j + 3)))
        .collect();
    let got: Vec<(usize, usize)> = pairs.senders.iter().copied().zip(pairs.receivers.iter().copied()).collect();
    assert_eq!(got, expected);
    assert_eq!(ordered_pairs(3), vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
}
