//! Edge-accuracy matching against a brute-force enumeration, baselines and
//! the trajectory error protocol.

use fnri::dataset::Dataset;
use fnri::eval::{
    discretize, edge_accuracy, permutation_consistency, random_predictions, static_mse, EdgeAccuracy, MseMode,
    PermutationMap,
};
use fnri::scheme::{FactorisationScheme, Variant};
use fnri::sim::{simulate_dataset, InteractionGraph, SimConfig, System, TrajectoryRecord};
use fnri::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lexicographic permutations by recursion.
fn lex_perms(n: usize) -> Vec<Vec<usize>> {
    fn go(rest: &[usize], prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
        }
        for (k, &v) in rest.iter().enumerate() {
            let mut next = rest.to_vec();
            next.remove(k);
            prefix.push(v);
            go(&next, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&(0..n).collect::<Vec<_>>(), &mut Vec::new(), &mut out);
    out
}

struct Oracle {
    map: PermutationMap,
    combined: f64,
    per_type: Vec<f64>,
    /// Number of maps reaching the best combined count.
    ties: usize,
}

/// Direct per-pair enumeration over layer assignments and binary label
/// flips, first maximiser wins.
fn brute_force_factorised(pred: &[usize], truth: &[u8], n: usize) -> Oracle {
    let rows = truth.len() / n;
    let mut best: Option<(usize, Oracle)> = None;
    for sigma in lex_perms(n) {
        for choice in 0..(1usize << n) {
            let flips: Vec<bool> = (0..n).map(|a| (choice >> (n - 1 - a)) & 1 == 1).collect();
            let mut hits = vec![0usize; n];
            let mut all = 0usize;
            for r in 0..rows {
                let mut mapped = vec![0u8; n];
                for a in 0..n {
                    let l = pred[r * n + a] as u8;
                    mapped[sigma[a]] = if flips[a] { 1 - l } else { l };
                }
                let ok: Vec<bool> = (0..n).map(|b| mapped[b] == truth[r * n + b]).collect();
                for b in 0..n {
                    hits[b] += ok[b] as usize;
                }
                all += ok.iter().all(|&x| x) as usize;
            }
            if let Some((c, o)) = best.as_mut() {
                if all == *c {
                    o.ties += 1;
                }
            }
            if best.as_ref().map_or(true, |(c, _)| all > *c) {
                let label_permutations = flips.iter().map(|&f| if f { vec![1, 0] } else { vec![0, 1] }).collect();
                best = Some((
                    all,
                    Oracle {
                        map: PermutationMap::Factorised {
                            layer_assignment: sigma.clone(),
                            label_permutations,
                        },
                        combined: all as f64 / rows as f64,
                        per_type: hits.iter().map(|&h| h as f64 / rows as f64).collect(),
                        ties: 1,
                    },
                ));
            }
        }
    }
    best.unwrap().1
}

fn brute_force_joint(pred: &[usize], truth: &[u8], layers: usize) -> Oracle {
    let rows = pred.len();
    let mut best: Option<(usize, Oracle)> = None;
    for codes in lex_perms(1 << layers) {
        let mut hits = vec![0usize; layers];
        let mut all = 0usize;
        for r in 0..rows {
            let code = codes[pred[r]];
            let ok: Vec<bool> = (0..layers).map(|b| ((code >> b) & 1) as u8 == truth[r * layers + b]).collect();
            for b in 0..layers {
                hits[b] += ok[b] as usize;
            }
            all += ok.iter().all(|&x| x) as usize;
        }
        if best.as_ref().map_or(true, |(c, _)| all > *c) {
            best = Some((
                all,
                Oracle {
                    map: PermutationMap::Joint { codes: codes.clone() },
                    combined: all as f64 / rows as f64,
                    per_type: hits.iter().map(|&h| h as f64 / rows as f64).collect(),
                    ties: 1,
                },
            ));
        }
    }
    best.unwrap().1
}

fn assert_matches(got: &EdgeAccuracy, want: &Oracle) {
    assert_eq!(got.map, want.map);
    assert_eq!(got.combined, want.combined);
    assert_eq!(got.per_type, want.per_type);
}

fn random_labels(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..k)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factorised_matcher_equals_brute_force(layers in 1usize..=3, seed in any::<u64>(), sfnri in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 20;
        let truth: Vec<u8> = random_labels(&mut rng, rows * layers, 2).into_iter().map(|v| v as u8).collect();
        let pred = random_labels(&mut rng, rows * layers, 2);
        let scheme = if sfnri {
            FactorisationScheme::new(Variant::Sfnri, &[layers]).unwrap()
        } else {
            FactorisationScheme::new(Variant::Fnri, &vec![2; layers]).unwrap()
        };
        let got = edge_accuracy(&pred, &truth, layers, &scheme).unwrap();
        assert_matches(&got, &brute_force_factorised(&pred, &truth, layers));
    }

    #[test]
    fn joint_matcher_equals_brute_force(layers in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = 20;
        let truth: Vec<u8> = random_labels(&mut rng, rows * layers, 2).into_iter().map(|v| v as u8).collect();
        let pred = random_labels(&mut rng, rows, 1 << layers);
        let scheme = FactorisationScheme::new(Variant::Nri, &[1 << layers]).unwrap();
        let got = edge_accuracy(&pred, &truth, layers, &scheme).unwrap();
        if layers == 1 {
            assert_matches(&got, &brute_force_factorised(&pred, &truth, 1));
        } else {
            assert_matches(&got, &brute_force_joint(&pred, &truth, layers));
        }
    }

    #[test]
    fn accuracy_ignores_relabeling_and_layer_order(seed in any::<u64>(), flip in 0usize..8, swap in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, layers) = (30, 3);
        let truth: Vec<u8> = random_labels(&mut rng, rows * layers, 2).into_iter().map(|v| v as u8).collect();
        let pred = random_labels(&mut rng, rows * layers, 2);
        let mut moved = pred.clone();
        for r in 0..rows {
            for a in 0..layers {
                if (flip >> a) & 1 == 1 {
                    moved[r * layers + a] = 1 - moved[r * layers + a];
                }
            }
            if swap {
                moved.swap(r * layers, r * layers + 2);
            }
        }
        let scheme = FactorisationScheme::new(Variant::Fnri, &[2, 2, 2]).unwrap();
        let a = edge_accuracy(&pred, &truth, layers, &scheme).unwrap();
        let b = edge_accuracy(&moved, &truth, layers, &scheme).unwrap();
        prop_assert_eq!(a.combined, b.combined);
        for p in &a.per_type {
            prop_assert!(a.combined <= *p);
        }
        if brute_force_factorised(&pred, &truth, layers).ties > 1 {
            return Ok(());
        }
        let mut pa = a.per_type.clone();
        let mut pb = b.per_type.clone();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        prop_assert_eq!(pa, pb);
    }
}

#[test]
fn label_swapped_single_layer_is_perfect() {
    let scheme = FactorisationScheme::new(Variant::Nri, &[2]).unwrap();
    let truth = [0u8, 1, 1, 0, 1];
    let pred: Vec<usize> = truth.iter().map(|&t| 1 - t as usize).collect();
    let acc = edge_accuracy(&pred, &truth, 1, &scheme).unwrap();
    assert_eq!(acc.combined, 1.0);
    assert_eq!(
        acc.map,
        PermutationMap::Factorised {
            layer_assignment: vec![0],
            label_permutations: vec![vec![1, 0]],
        }
    );
}

#[test]
fn constructed_two_layer_case() {
    let scheme = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    let truth = [0u8, 0, 1, 1];
    let pred = [0usize, 0, 0, 1];
    let acc = edge_accuracy(&pred, &truth, 2, &scheme).unwrap();
    assert_eq!(acc.per_type, vec![0.5, 1.0]);
    assert_eq!(acc.combined, 0.5);
}

#[test]
fn matcher_rejects_incompatible_schemes() {
    let three = FactorisationScheme::new(Variant::Nri, &[3]).unwrap();
    let err = edge_accuracy(&[0, 1], &[0, 1, 1, 0], 2, &three).unwrap_err();
    assert!(matches!(err, Error::SchemeMismatch(_)));
    let fnri = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    assert!(edge_accuracy(&[0, 1], &[0, 1, 1], 3, &fnri).is_err());
}

fn random_baseline(scheme: &FactorisationScheme, layers: usize, rows: usize) -> EdgeAccuracy {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let truth: Vec<u8> = (0..rows * layers).map(|_| rng.random_range(0..2u8)).collect();
    let pred = random_predictions(rows, scheme, &mut rng);
    edge_accuracy(&pred, &truth, layers, scheme).unwrap()
}

#[test]
fn random_predictions_hit_chance_levels() {
    let ic = FactorisationScheme::default_for(Variant::Fnri, System::SpringsCharges);
    let acc = random_baseline(&ic, 2, 200_000);
    assert!((acc.combined - 0.25).abs() < 0.005, "{}", acc.combined);
    for p in acc.per_type {
        assert!((p - 0.5).abs() < 0.005);
    }
    let icf = FactorisationScheme::default_for(Variant::Fnri, System::SpringsChargesFinite);
    let acc = random_baseline(&icf, 3, 200_000);
    assert!((acc.combined - 0.125).abs() < 0.005, "{}", acc.combined);
    let nri = FactorisationScheme::default_for(Variant::Nri, System::SpringsCharges);
    let acc = random_baseline(&nri, 2, 200_000);
    assert!((acc.combined - 0.25).abs() < 0.005, "{}", acc.combined);
}

#[test]
fn consistency_histogram() {
    let scheme = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = 400;
    let truth: Vec<u8> = (0..rows * 2).map(|_| rng.random_range(0..2u8)).collect();
    let perfect: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
    let bins = permutation_consistency(&perfect, &truth, 2, &scheme, 20).unwrap();
    assert_eq!(bins.len(), 1);
    assert_eq!(bins[0].batches, 20);

    let swapped: Vec<usize> = truth.chunks(2).flat_map(|p| [1 - p[1] as usize, p[0] as usize]).collect();
    let bins = permutation_consistency(&swapped, &truth, 2, &scheme, 20).unwrap();
    assert_eq!(bins.len(), 1);
    assert_eq!(bins[0].map, "layers[1, 0] labels[[1, 0], [0, 1]]");

    let noise = random_predictions(rows, &scheme, &mut rng);
    let bins = permutation_consistency(&noise, &truth, 2, &scheme, 20).unwrap();
    assert!(bins.len() > 2, "{bins:?}");
    assert!(bins[0].batches < 20);
}

#[test]
fn discretize_examples() {
    let fnri = FactorisationScheme::new(Variant::Fnri, &[2, 2]).unwrap();
    let z = Tensor::from_rows(&[vec![0.9, 0.1, 0.5, 0.5], vec![0.2, 0.8, 0.3, 0.7]]).unwrap();
    assert_eq!(discretize(&z, &fnri), vec![0, 0, 1, 1]);
    let sf = FactorisationScheme::new(Variant::Sfnri, &[2]).unwrap();
    let z = Tensor::from_rows(&[vec![0.49, 0.51], vec![0.5, 1.0]]).unwrap();
    assert_eq!(discretize(&z, &sf), vec![0, 1, 0, 1]);
}

fn frozen_dataset() -> Dataset {
    let mut cfg = SimConfig::default();
    cfg.t_record = 40;
    let records: Vec<TrajectoryRecord> = (0..3)
        .map(|k| {
            let mut traj = Tensor::zeros(&[40, 5, 4]);
            for t in 0..40 {
                for i in 0..5 {
                    traj.data_mut()[(t * 5 + i) * 4] = (i + k) as f64 * 0.3;
                    traj.data_mut()[(t * 5 + i) * 4 + 1] = -(i as f64) * 0.2;
                }
            }
            TrajectoryRecord {
                trajectory: traj,
                graph: InteractionGraph::empty(5, System::SpringsCharges),
                seed: k as u64,
            }
        })
        .collect();
    Dataset::from_records(&records, &cfg, 0).unwrap()
}

#[test]
fn static_baseline_is_exact_on_frozen_particles() {
    let data = frozen_dataset();
    for mode in [MseMode::At, MseMode::Cum] {
        assert_eq!(static_mse(&data, &[1, 10, 19], mode).unwrap(), vec![0.0; 3]);
    }
}

#[test]
fn static_baseline_matches_direct_computation() {
    let mut cfg = SimConfig::default();
    cfg.t_record = 60;
    let data = Dataset::from_records(&simulate_dataset(&cfg, 6, 3).unwrap(), &cfg, 3).unwrap();
    let step = 5 * 4;
    let per_step = |k: usize| {
        let mut total = 0.0;
        for e in 0..data.len() {
            let x = data.trajectory(e);
            for c in 0..step {
                total += (x[(30 + k) * step + c] - x[30 * step + c]).powi(2);
            }
        }
        total / (data.len() * step) as f64
    };
    let at = static_mse(&data, &[1, 10, 20], MseMode::At).unwrap();
    let want = [per_step(1), per_step(10), per_step(20)];
    for (a, w) in at.iter().zip(want) {
        assert!((a - w).abs() <= 1e-12 * w.max(1.0));
    }
    let cum = static_mse(&data, &[10], MseMode::Cum).unwrap()[0];
    let want: f64 = (1..=10).map(per_step).sum::<f64>() / 10.0;
    assert!((cum - want).abs() <= 1e-12);
    assert!(static_mse(&data, &[30], MseMode::At).is_err());
    assert!(static_mse(&data, &[0], MseMode::At).is_err());
}
