//! Derived values checked against independent computations.

mod common;

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use rand::Rng;
use sflguard::detect::{build_knn_graph, compute_tas, kde, propagate, PprParams, Teleport};
use sflguard::influence::{influence_matrix, ScoreLift};
use sflguard::nn::{per_sample_cross_entropy, Activation, MlpModel};
use sflguard::sfl::{server_train_step, ServerState, SmashedRecord};
use sflguard::sgv::estimate_sgv;

use common::*;

#[test]
fn every_gradient_matches_finite_differences() {
    let outcomes = gradient_suite(20);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn split_gradients_equal_the_monolithic_model() {
    for seed in 0..20 {
        let gap = split_gap(seed);
        assert!(gap < 1e-8, "seed {seed}: gap {gap}");
    }
}

#[test]
fn server_smashed_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let model = MlpModel::from_widths(&[3, 6, 4], Activation::Sigmoid, Activation::Identity, &mut r).unwrap();
    let z = normal_matrix(&mut r, 5, 3, 1.0);
    let y = labels(&mut r, 5, 4);
    let records: Vec<SmashedRecord> = (0..5)
        .map(|i| SmashedRecord {
            sample_id: 10 + i,
            client_id: 0,
            features: z.row(i).to_vec(),
            label: y[i],
            poison_truth: false,
        })
        .collect();
    let mut server = ServerState::new(model.clone());
    let step = server_train_step(&mut server, &records, &sflguard::nn::Sgd::new(1e-3)).unwrap();
    let mean_loss = |flat: &[f64]| {
        let zz = Array2::from_shape_vec((5, 3), flat.to_vec()).unwrap();
        let (l, _) = sflguard::nn::cross_entropy(&model.predict(&zz, None).unwrap(), &y).unwrap();
        l
    };
    let numeric = numeric_gradient(mean_loss, z.as_slice().unwrap(), FD_STEP);
    let analytic: Vec<f64> = step.smashed_gradients.iter().flat_map(|(_, g)| g.to_vec()).collect();
    assert!(worst_relative(&analytic, &numeric) < 1e-4);
    let ids: Vec<usize> = step.smashed_gradients.iter().map(|(s, _)| *s).collect();
    assert_eq!(ids, (10..15).collect::<Vec<_>>());
}

#[test]
fn tiny_beta_recovers_cooccurrence_counts() {
    for seed in 0..20 {
        let (scores, gis, lx, ly) = influence_instance(seed);
        let m = influence_matrix(&scores, &gis, &lx, &ly, 1e-14, ScoreLift::Outer).unwrap();
        let expected = cooccurrence(&lx, &ly, gis.nrows(), gis.ncols());
        for (a, b) in m.values.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn influence_matches_neumann_series() {
    for seed in 0..20 {
        let (scores, gis, lx, ly) = influence_instance(100 + seed);
        let beta = rng(seed).random_range(0.05..0.9);
        let m = influence_matrix(&scores, &gis, &lx, &ly, beta, ScoreLift::Outer).unwrap();
        let oracle = neumann_influence(&scores, &gis, &lx, &ly, beta);
        for (a, b) in m.values.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }
}

fn cloud(seed: u64, n: usize, d: usize) -> Array2<f64> {
    normal_matrix(&mut rng(seed), n, d, 1.0)
}

#[test]
fn converged_scores_are_fixed_points() {
    for (seed, teleport) in (0..12).zip([Teleport::Degree, Teleport::Uniform, Teleport::InverseDegree].iter().cycle()) {
        let g = build_knn_graph(&cloud(seed, 40 + seed as usize * 5, 3), 6).unwrap();
        let params = PprParams {
            teleport: *teleport,
            ..PprParams::default()
        };
        let tas = compute_tas(&g, &params).unwrap();
        assert!(tas.converged);
        let next = propagate(&g, &tas.scores, &tas.teleport, params.alpha);
        let residual: f64 = next.iter().zip(&tas.scores).map(|(a, b)| (a - b).abs()).sum();
        assert!(residual < 10.0 * params.tol, "seed {seed}: residual {residual}");
    }
}

/// Equally spaced points on a circle with k = 2 give a ring: every node has
/// the same two equal-weight neighbours.
#[test]
fn regular_graph_scores_are_uniform() {
    for n in [8usize, 15, 32] {
        let z = Array2::from_shape_fn((n, 2), |(i, j)| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            if j == 0 { t.cos() } else { t.sin() }
        });
        let g = build_knn_graph(&z, 2).unwrap();
        assert_eq!(g.edge_count(), n);
        for teleport in [Teleport::Degree, Teleport::Uniform, Teleport::InverseDegree] {
            let tas = compute_tas(&g, &PprParams { teleport, ..PprParams::default() }).unwrap();
            let first = tas.scores[0];
            for s in &tas.scores {
                assert_abs_diff_eq!(*s, first, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn density_integrates_to_one() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let n = r.random_range(2..200);
        let spread = r.random_range(0.01..10.0);
        let scores: Vec<f64> = (0..n).map(|_| spread * r.random::<f64>()).collect();
        let curve = kde(&scores, None).unwrap();
        assert!((curve.integral() - 1.0).abs() < 1e-2, "seed {seed}: {}", curve.integral());
    }
}

/// Brute-force gradient variance: one forward/backward per record instead
/// of the batched per-sample pass.
#[test]
fn variance_matches_per_record_loops() {
    let mut r = rng(9);
    let server = MlpModel::from_widths(&[3, 5, 4], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let records: Vec<SmashedRecord> = (0..12)
        .map(|i| SmashedRecord {
            sample_id: i,
            client_id: i % 3,
            features: normal_matrix(&mut r, 1, 3, 1.0).into_raw_vec_and_offset().0,
            label: r.random_range(0..4),
            poison_truth: i % 4 == 0,
        })
        .collect();
    let report = estimate_sgv(&server, &records).unwrap();
    let grads: Vec<Vec<f64>> = records
        .iter()
        .map(|rec| {
            let z = Array2::from_shape_vec((1, 3), rec.features.clone()).unwrap();
            let t = server.forward(&z, None).unwrap();
            let (_, g) = per_sample_cross_entropy(t.output(), &[rec.label]).unwrap();
            server.backward(&t, &g).unwrap().flat()
        })
        .collect();
    let p = grads[0].len();
    let mean: Vec<f64> = (0..p).map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / grads.len() as f64).collect();
    let brute = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / grads.len() as f64;
    assert_abs_diff_eq!(report.sgv, brute, epsilon = 1e-12 * brute.max(1.0));
    assert_eq!((report.clean, report.poisoned), (9, 3));
}
