//! Independent oracles shared by the integration suites: central finite
//! differences, a brute-force Neumann series for the influence matrix and a
//! concatenated monolithic model for the split-gradient comparison.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sflguard::distill::{student_loss, DistillConfig};
use sflguard::influence::ad_teacher_loss;
use sflguard::nn::{cross_entropy, kl_distill, Activation, Dense, MlpModel};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn labels<R: Rng>(rng: &mut R, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative discrepancy, with a floor on the denominator so exact
/// zeros compare absolutely.
pub fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

fn matrix_fd(m: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    let shape = m.raw_dim();
    numeric_gradient(
        |x| f(&Array2::from_shape_vec(shape, x.to_vec()).unwrap()),
        m.as_slice().unwrap(),
        FD_STEP,
    )
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

#[derive(Clone, Debug)]
pub struct FdOutcome {
    pub kind: &'static str,
    pub case: usize,
    pub worst: f64,
}

impl FdOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= FD_TOL
    }
}

/// Backward pass of a random multi-layer model with a head, against
/// differences of the linear functional `sum(out * probe)`.
pub fn fd_backward(seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = r.random_range(2..5);
    let h = r.random_range(2..6);
    let c = r.random_range(2..5);
    let mut model = MlpModel::multi_head(&[d, h, h], Activation::Sigmoid, &[("x", c)], &mut r).unwrap();
    let x = normal_matrix(&mut r, 4, d, 1.0);
    let probe = normal_matrix(&mut r, 4, c, 1.0);
    let trace = model.forward(&x, Some("x")).unwrap();
    let bundle = model.backward(&trace, &probe).unwrap();
    let params = model.flat_params();
    let numeric = numeric_gradient(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            (m.predict(&x, Some("x")).unwrap() * &probe).sum()
        },
        &params,
        FD_STEP,
    );
    let param_err = worst_relative(&bundle.flat(), &numeric);
    let input_numeric = matrix_fd(&x, |xi| (model.predict(xi, Some("x")).unwrap() * &probe).sum());
    let input_err = worst_relative(&flat(bundle.input.as_ref().unwrap()), &input_numeric);
    model.set_flat_params(&params).unwrap();
    param_err.max(input_err)
}

pub fn fd_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(2..7);
    let logits = normal_matrix(&mut r, 5, c, 2.0);
    let y = labels(&mut r, 5, c);
    let (_, grad) = cross_entropy(&logits, &y).unwrap();
    let numeric = matrix_fd(&logits, |l| cross_entropy(l, &y).unwrap().0);
    worst_relative(&flat(&grad), &numeric)
}

pub fn fd_kl(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.random_range(2..7);
    let teacher = normal_matrix(&mut r, 5, c, 2.0);
    let student = normal_matrix(&mut r, 5, c, 2.0);
    let tau = r.random_range(0.5..5.0);
    let (_, grad) = kl_distill(&teacher, &student, tau).unwrap();
    let numeric = matrix_fd(&student, |s| kl_distill(&teacher, s, tau).unwrap().0);
    worst_relative(&flat(&grad), &numeric)
}

pub fn fd_ad_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, nb, nc) = (6, r.random_range(2..5), r.random_range(2..5));
    let la = normal_matrix(&mut r, n, 2, 1.5);
    let lb = normal_matrix(&mut r, n, nb, 1.5);
    let lc = normal_matrix(&mut r, n, nc, 1.5);
    let (ya, yb, yc) = (labels(&mut r, n, 2), labels(&mut r, n, nb), labels(&mut r, n, nc));
    let m_ab = normal_matrix(&mut r, 2, nb, 1.0).mapv(f64::abs);
    let m_ac = normal_matrix(&mut r, 2, nc, 1.0).mapv(f64::abs);
    let (lam_b, lam_c) = (r.random_range(0.1..2.0), r.random_range(0.1..2.0));
    let total = |a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>| {
        ad_teacher_loss((a, b, c), (&ya, &yb, &yc), &m_ab, &m_ac, lam_b, lam_c).unwrap().total
    };
    let loss = ad_teacher_loss((&la, &lb, &lc), (&ya, &yb, &yc), &m_ab, &m_ac, lam_b, lam_c).unwrap();
    let ea = worst_relative(&flat(&loss.grad_a), &matrix_fd(&la, |a| total(a, &lb, &lc)));
    let eb = worst_relative(&flat(&loss.grad_b), &matrix_fd(&lb, |b| total(&la, b, &lc)));
    let ec = worst_relative(&flat(&loss.grad_c), &matrix_fd(&lc, |c| total(&la, &lb, c)));
    ea.max(eb).max(ec)
}

pub fn fd_student_loss(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, nb) = (6, r.random_range(2..5));
    let sa = normal_matrix(&mut r, n, 2, 1.5);
    let sb = normal_matrix(&mut r, n, nb, 1.5);
    let (ya, yb) = (labels(&mut r, n, 2), labels(&mut r, n, nb));
    let va = normal_matrix(&mut r, n, 2, 2.0);
    let ia = normal_matrix(&mut r, n, 2, 2.0);
    let (mu, eta) = (r.random_range(0.05..0.95), r.random_range(0.05..0.95));
    let cfg = DistillConfig {
        tau: r.random_range(1.0..5.0),
        lambda_b: r.random_range(0.1..1.5),
        ..DistillConfig::default()
    };
    let total = |a: &Array2<f64>, b: &Array2<f64>| {
        student_loss(a, b, &ya, &yb, Some(&va), Some(&ia), mu, eta, &cfg).unwrap().total
    };
    let loss = student_loss(&sa, &sb, &ya, &yb, Some(&va), Some(&ia), mu, eta, &cfg).unwrap();
    let ea = worst_relative(&flat(&loss.grad_a), &matrix_fd(&sa, |a| total(a, &sb)));
    let eb = worst_relative(&flat(&loss.grad_b), &matrix_fd(&sb, |b| total(&sa, b)));
    ea.max(eb)
}

/// Runs `cases` seeded checks of every differentiable objective.
pub fn gradient_suite(cases: usize) -> Vec<FdOutcome> {
    let kinds: [(&'static str, fn(u64) -> f64); 5] = [
        ("backward", fd_backward),
        ("cross_entropy", fd_cross_entropy),
        ("kl_distill", fd_kl),
        ("ad_teacher_loss", fd_ad_loss),
        ("student_loss", fd_student_loss),
    ];
    let mut out = Vec::new();
    for (kind, check) in kinds {
        for case in 0..cases {
            out.push(FdOutcome {
                kind,
                case,
                worst: check(1000 + case as u64),
            });
        }
    }
    out
}

/// Client and server models plus the monolithic model made of both stacks.
pub fn split_pair(seed: u64) -> (MlpModel, MlpModel, MlpModel) {
    let mut r = rng(seed);
    let d = r.random_range(2..6);
    let dz = r.random_range(1..4);
    let h = r.random_range(2..6);
    let c = r.random_range(2..5);
    let client = MlpModel::from_widths(&[d, h, dz], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let server = MlpModel::from_widths(&[dz, h, c], Activation::Relu, Activation::Identity, &mut r).unwrap();
    let layers: Vec<Dense> = client.layers().iter().chain(server.layers()).cloned().collect();
    let whole = MlpModel::with_heads(layers, BTreeMap::new()).unwrap();
    (client, server, whole)
}

/// Largest absolute gap between the composed split gradient (server, then
/// client fed the server's input gradient) and the monolithic gradient.
pub fn split_gap(seed: u64) -> f64 {
    let (client, server, whole) = split_pair(seed);
    let mut r = rng(seed ^ 0xabc);
    let x = normal_matrix(&mut r, 7, client.input_dim(), 1.0);
    let y = labels(&mut r, 7, server.output_dim(None).unwrap());
    let ct = client.forward(&x, None).unwrap();
    let st = server.forward(ct.output(), None).unwrap();
    let (_, g) = cross_entropy(st.output(), &y).unwrap();
    let sg = server.backward(&st, &g).unwrap();
    let cg = client.backward(&ct, sg.input.as_ref().unwrap()).unwrap();
    let wt = whole.forward(&x, None).unwrap();
    let (_, wg) = cross_entropy(wt.output(), &y).unwrap();
    let composed: Vec<f64> = cg.flat().into_iter().chain(sg.flat()).collect();
    let mono = whole.backward(&wt, &wg).unwrap().flat();
    assert_eq!(composed.len(), mono.len());
    composed.iter().zip(&mono).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `(1−β) Eᵀ Σ_t (βQ)^t F` summed until the terms vanish, with `Q` built
/// from scratch: outer-product score lift, pair matrix, absolute row sums.
pub fn neumann_influence(scores: &[f64], gis: &Array2<f64>, lx: &[usize], ly: &[usize], beta: f64) -> Array2<f64> {
    let k = scores.len();
    let max = scores
        .iter()
        .flat_map(|a| scores.iter().map(move |b| a * b))
        .fold(0.0f64, f64::max);
    let mut q = Array2::from_shape_fn((k, k), |(i, j)| {
        let lift = if max > 0.0 { scores[i] * scores[j] / max } else { scores[i] * scores[j] };
        lift * gis[[lx[i], ly[j]]]
    });
    for mut row in q.rows_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            row /= s;
        }
    }
    let f = Array2::from_shape_fn((k, gis.ncols()), |(i, j)| f64::from(u8::from(ly[i] == j)));
    let mut term = f.clone();
    let mut acc = f;
    for _ in 0..10_000 {
        term = q.dot(&term) * beta;
        acc += &term;
        if term.iter().all(|v| v.abs() < 1e-18) {
            break;
        }
    }
    let mut out = Array2::zeros((gis.nrows(), gis.ncols()));
    for (i, &x) in lx.iter().enumerate() {
        for j in 0..gis.ncols() {
            out[[x, j]] += acc[[i, j]];
        }
    }
    out * (1.0 - beta)
}

/// `Eᵀ F`: co-occurrence counts of the two label sets.
pub fn cooccurrence(lx: &[usize], ly: &[usize], rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (&a, &b) in lx.iter().zip(ly) {
        out[[a, b]] += 1.0;
    }
    out
}

/// A random small influence instance: scores, GIS, and node labels.
pub fn influence_instance(seed: u64) -> (Vec<f64>, Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let k = r.random_range(2..=30);
    let rows = r.random_range(2..4);
    let cols = r.random_range(2..6);
    let scores: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
    let gis = Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0));
    (scores, gis, labels(&mut r, k, rows), labels(&mut r, k, cols))
}
