//! Whole-round behaviour of the simulator and the attack suite.

mod common;

use ndarray::Array2;
use sflguard::attacks::{adaptive_tas_evasion, apply_multi, poison_labels, poison_smashed, poison_weights, AttackContext, AttackMask, AttackSpec, Artifacts, WeightMode};
use sflguard::bench::desk_toml;
use sflguard::config::ExperimentConfig;
use sflguard::data::Dataset;
use sflguard::detect::{score_nodes, DetectConfig};
use sflguard::experiment::{build_system, run_experiment};
use sflguard::nn::{Activation, Dense, MlpModel, Sgd};
use sflguard::rng::{stream_rng, Stream};
use sflguard::sfl::{
    aggregate, client_backward, client_forward, evaluate, feature_matrix, server_train_step, Aggregator, Batch,
    IdentityHook, RoundReport, ServerState, SmashedRecord,
};

fn desk(overrides: &[(&str, &str)]) -> ExperimentConfig {
    let pairs: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ExperimentConfig::from_toml_with_overrides(desk_toml(), &pairs).unwrap()
}

fn strip_time(mut r: RoundReport) -> RoundReport {
    r.wall_ms = 0;
    r
}

#[test]
fn two_clean_clients_learn_separable_data() {
    let config = desk(&[("clients", "2"), ("malicious_ratio", "0.0"), ("attack", "\"none\""), ("rounds", "50"), ("spread", "0.2")]);
    let result = run_experiment(&config).unwrap();
    assert!(result.summary.final_accuracy >= 0.95, "{}", result.summary.final_accuracy);
}

/// A consistent shift teaches the shifted map, so accuracy ends at or below
/// the 1/C chance level.
#[test]
fn label_shift_on_every_client_destroys_accuracy() {
    let config = desk(&[("malicious_ratio", "1.0"), ("attack", "\"LP\""), ("label_shift", "1"), ("rounds", "30")]);
    let result = run_experiment(&config).unwrap();
    let chance = 1.0 / config.classes as f64;
    assert!(result.summary.final_accuracy <= chance + 0.05, "{}", result.summary.final_accuracy);
}

#[test]
fn identity_hook_matches_no_hook_and_rounds_are_deterministic() {
    let config = desk(&[("rounds", "3")]);
    let mut plain = build_system(&config).unwrap();
    let mut hooked = build_system(&config).unwrap();
    let mut again = build_system(&config).unwrap();
    for _ in 0..3 {
        let a = strip_time(plain.run_round(None).unwrap());
        let b = strip_time(hooked.run_round(Some(&mut IdentityHook)).unwrap());
        let c = strip_time(again.run_round(None).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn same_seed_gives_identical_metrics_csv() {
    let config = desk(&[("rounds", "4"), ("defense", "\"full\""), ("warmup_rounds", "1"), ("refresh_every", "2")]);
    assert_eq!(run_experiment(&config).unwrap().csv, run_experiment(&config).unwrap().csv);
}

#[test]
fn identity_client_forwards_raw_inputs() {
    let config = desk(&[("attack", "\"none\"")]);
    let mut system = build_system(&config).unwrap();
    let d = system.clients[0].train.dim();
    let eye = Dense::new(Array2::eye(d), ndarray::Array1::zeros(d), Activation::Identity).unwrap();
    system.clients[0].model = MlpModel::new(vec![eye]).unwrap();
    let client = &system.clients[0];
    let batch = client.batch(&[0, 1, 2]);
    let (records, _) = client_forward(client, &batch).unwrap();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.features, batch.features.row(i).to_vec());
        assert!(!r.poison_truth);
        assert_eq!(r.sample_id, client.train_ids[i]);
    }
}

#[test]
fn smashed_attack_is_clean_forward_plus_noise() {
    let config = desk(&[]);
    let system = build_system(&config).unwrap();
    let client = &system.clients[1];
    let batch = client.batch(&(0..20).collect::<Vec<_>>());
    let (clean, _) = client_forward(client, &batch).unwrap();
    let spec = AttackSpec {
        mask: AttackMask { smashed: true, ..AttackMask::NONE },
        smashed_scale: 3.0,
        ..AttackSpec::default()
    };
    let ctx = AttackContext { seed: 4, client_id: 1, round: 2, classes: 10, input_std: vec![1.0; batch.features.ncols()] };
    let mut attacked = clean.clone();
    apply_multi(&spec, &ctx, Artifacts { records: Some(&mut attacked), ..Default::default() }).unwrap();
    let std = {
        let m = feature_matrix(&clean);
        let n = m.nrows() as f64;
        m.columns()
            .into_iter()
            .map(|c| {
                let mean = c.sum() / n;
                (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect::<Vec<_>>()
    };
    let mut manual = clean.clone();
    poison_smashed(&mut manual, 3.0, &std, &mut stream_rng(4, Stream::SmashedNoise, 1, 2)).unwrap();
    for ((a, m), c) in attacked.iter().zip(&manual).zip(&clean) {
        assert!(a.poison_truth);
        for ((x, y), z) in a.features.iter().zip(&m.features).zip(&c.features) {
            assert!((x - y).abs() < 1e-12);
            assert!(x != z);
        }
    }
}

#[test]
fn label_and_smashed_compose_stage_by_stage() {
    let spec = AttackSpec {
        mask: AttackMask { label: true, smashed: true, ..AttackMask::NONE },
        label_shift: 3,
        smashed_scale: 2.0,
        ..AttackSpec::default()
    };
    let ctx = AttackContext { seed: 1, client_id: 0, round: 0, classes: 10, input_std: vec![1.0; 2] };
    let feats = Array2::from_shape_fn((6, 2), |(i, j)| (i * 2 + j) as f64);
    let mut batch = Batch::new((0..6).collect(), feats.clone(), vec![0, 1, 2, 7, 8, 9]);
    apply_multi(&spec, &ctx, Artifacts { batch: Some(&mut batch), ..Default::default() }).unwrap();
    let mut manual = Batch::new((0..6).collect(), feats, vec![0, 1, 2, 7, 8, 9]);
    poison_labels(&mut manual, 3, 10).unwrap();
    assert_eq!(batch.labels, manual.labels);
    assert_eq!(batch.labels, vec![3, 4, 5, 0, 1, 2]);
    assert_eq!(batch.features, manual.features);
}

#[test]
fn one_sign_flipped_model_among_ten_scales_the_mean() {
    let mut r = common::rng(2);
    let v = MlpModel::from_widths(&[3, 2], Activation::Identity, Activation::Identity, &mut r).unwrap();
    let mut models = vec![v.clone(); 10];
    poison_weights(&mut models[0], 2.0, WeightMode::SignFlip, &mut r).unwrap();
    let mean = aggregate(&models, &[1.0; 10], Aggregator::FedAvg).unwrap();
    for (m, p) in mean.flat_params().iter().zip(v.flat_params()) {
        assert!((m - 0.8 * p).abs() < 1e-12);
    }
}

#[test]
fn evasion_raises_scores_of_poisoned_records() {
    let mut r = common::rng(6);
    let clean = common::normal_matrix(&mut r, 150, 3, 1.0);
    let mut records: Vec<SmashedRecord> = (0..180)
        .map(|i| SmashedRecord {
            sample_id: i,
            client_id: 0,
            features: if i < 150 {
                clean.row(i).to_vec()
            } else {
                common::normal_matrix(&mut r, 1, 3, 6.0).into_raw_vec_and_offset().0
            },
            label: 0,
            poison_truth: i >= 150,
        })
        .collect();
    let cfg = DetectConfig::default();
    let mean_poisoned = |recs: &[SmashedRecord]| {
        let s = score_nodes(&feature_matrix(recs), &cfg).unwrap().scores;
        s[150..].iter().sum::<f64>() / 30.0
    };
    let before = mean_poisoned(&records);
    adaptive_tas_evasion(&mut records, &clean, 0.5, 10).unwrap();
    let after = mean_poisoned(&records);
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn server_step_gives_equal_gradients_to_duplicates_and_lowers_loss() {
    let mut r = common::rng(8);
    let model = MlpModel::from_widths(&[3, 5, 4], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let rec = SmashedRecord { sample_id: 0, client_id: 0, features: vec![0.3, -0.7, 1.1], label: 2, poison_truth: false };
    let twin = SmashedRecord { sample_id: 1, ..rec.clone() };
    let mut server = ServerState::new(model.clone());
    let step = server_train_step(&mut server, &[rec.clone(), twin], &Sgd::new(0.01)).unwrap();
    assert_eq!(step.smashed_gradients[0].1, step.smashed_gradients[1].1);
    let mut single = ServerState::new(model);
    let first = server_train_step(&mut single, std::slice::from_ref(&rec), &Sgd::new(0.01)).unwrap();
    let second = server_train_step(&mut single, std::slice::from_ref(&rec), &Sgd::new(0.01)).unwrap();
    assert!(second.loss < first.loss);
}

#[test]
fn zero_smashed_gradients_leave_the_client_alone_and_twins_move_together() {
    let config = desk(&[("attack", "\"none\"")]);
    let system = build_system(&config).unwrap();
    let mut a = system.clients[0].clone();
    let batch = a.batch(&[0, 1, 2, 3]);
    let (_, trace) = client_forward(&a, &batch).unwrap();
    let before = a.model.flat_params();
    let zeros: Vec<(usize, ndarray::Array1<f64>)> =
        batch.sample_ids.iter().map(|&s| (s, ndarray::Array1::zeros(config.bottleneck))).collect();
    client_backward(&mut a, &trace, &zeros, &Sgd::new(0.1)).unwrap();
    assert_eq!(a.model.flat_params(), before);

    let mut b = system.clients[0].clone();
    let mut c = system.clients[0].clone();
    let grads: Vec<(usize, ndarray::Array1<f64>)> =
        batch.sample_ids.iter().map(|&s| (s, ndarray::Array1::from_elem(config.bottleneck, 0.1))).collect();
    let (_, tb) = client_forward(&b, &batch).unwrap();
    let (_, tc) = client_forward(&c, &batch).unwrap();
    client_backward(&mut b, &tb, &grads, &Sgd::new(0.1)).unwrap();
    client_backward(&mut c, &tc, &grads, &Sgd::new(0.1)).unwrap();
    assert_eq!(b.model.flat_params(), c.model.flat_params());
    assert_ne!(b.model.flat_params(), before);
}

#[test]
fn evaluation_matches_a_recount() {
    // A zero server with a bias on class 0 predicts class 0 everywhere.
    let mut r = common::rng(4);
    let client = MlpModel::from_widths(&[2, 3], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let mut bias = ndarray::Array1::zeros(4);
    bias[0] = 1.0;
    let server = MlpModel::new(vec![Dense::new(Array2::zeros((4, 3)), bias, Activation::Identity).unwrap()]).unwrap();
    let balanced = Dataset::new(common::normal_matrix(&mut r, 8, 2, 1.0), vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
    let eval = evaluate(&[&client], &server, &[&balanced]).unwrap();
    assert_eq!(eval.global, 0.25);

    let other = MlpModel::from_widths(&[3, 4], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let data = Dataset::new(common::normal_matrix(&mut r, 30, 2, 1.0), common::labels(&mut r, 30, 4), 4).unwrap();
    let preds = sflguard::sfl::predict(&client, &other, &data).unwrap();
    let recount = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / 30.0;
    assert_eq!(evaluate(&[&client], &other, &[&data]).unwrap().global, recount);
}
