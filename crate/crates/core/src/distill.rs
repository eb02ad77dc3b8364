//! Two-teacher distillation of the validation student.
//!
//! The vanilla teacher learns what clean activations look like; the
//! influence teacher carries anomaly awareness. The student fits its own
//! poison and client heads while matching both teachers' poison logits,
//! with the two distillation weights steered by a momentum rule toward
//! whichever teacher it currently disagrees with more.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{HEAD_A, HEAD_B};
use crate::nn::{per_sample_cross_entropy, per_sample_kl, sigmoid, Activation, Adam, MlpModel};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub tau: f64,
    pub momentum: f64,
    pub kappa: f64,
    pub eps: f64,
    pub mu0: f64,
    pub eta0: f64,
    pub lambda_b: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Poisoned-to-clean ratio of the vanilla teacher's reservoir.
    pub reservoir_ratio: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            momentum: 0.9,
            kappa: 5.0,
            eps: 1e-8,
            mu0: 0.5,
            eta0: 0.5,
            lambda_b: 0.5,
            hidden: 32,
            epochs: 50,
            lr: 1e-2,
            batch: 64,
            reservoir_ratio: 0.25,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config("momentum_m", format!("must lie in (0,1], got {}", self.momentum)));
        }
        for (name, v) in [("mu0", self.mu0), ("eta0", self.eta0)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(name, format!("must lie in (0,1), got {v}")));
            }
        }
        if self.eps < 0.0 || self.kappa < 0.0 || self.lambda_b < 0.0 {
            return Err(Error::config("kappa", "kappa, eps and lambda_b must be non-negative"));
        }
        if self.hidden == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("student_lr", "widths, batch and lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reservoir_ratio) {
            return Err(Error::config("reservoir_ratio", "must lie in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentumState {
    pub mu: f64,
    pub eta: f64,
    /// `(L_VS, L_IS, μ_t, η_t)` per update.
    pub history: Vec<(f64, f64, f64, f64)>,
}

impl MomentumState {
    pub fn new(config: &DistillConfig) -> Self {
        Self {
            mu: config.mu0,
            eta: config.eta0,
            history: Vec::new(),
        }
    }
}

/// Moves `μ` toward `σ(κ(L_VS − L_IS)/(L_VS + L_IS + ε))` and `η` toward
/// the mirrored target.
pub fn momentum_update(state: &mut MomentumState, l_vs: f64, l_is: f64, config: &DistillConfig) -> Result<(f64, f64)> {
    if !(l_vs.is_finite() && l_is.is_finite()) || l_vs < 0.0 || l_is < 0.0 {
        return Err(Error::Domain(format!("distillation losses must be finite and non-negative, got {l_vs}, {l_is}")));
    }
    let denom = l_vs + l_is + config.eps;
    let (target_mu, target_eta) = if denom > 0.0 {
        (
            sigmoid(config.kappa * (l_vs - l_is) / denom),
            sigmoid(config.kappa * (l_is - l_vs) / denom),
        )
    } else {
        (0.5, 0.5)
    };
    let m = config.momentum;
    state.mu = m * state.mu + (1.0 - m) * target_mu;
    state.eta = m * state.eta + (1.0 - m) * target_eta;
    state.history.push((l_vs, l_is, state.mu, state.eta));
    Ok((state.mu, state.eta))
}

/// Student objective on one batch with gradients for both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentLoss {
    pub total: f64,
    pub supervised: f64,
    pub l_vs: f64,
    pub l_is: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

/// `Σ_k [L_a + λ_b L_b] + μ·L_VS + η·L_IS`, the distillation terms summed
/// over the batch. A missing teacher contributes nothing.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    student_a: &Array2<f64>,
    student_b: &Array2<f64>,
    labels_a: &[usize],
    labels_b: &[usize],
    vanilla_a: Option<&Array2<f64>>,
    influence_a: Option<&Array2<f64>>,
    mu: f64,
    eta: f64,
    config: &DistillConfig,
) -> Result<StudentLoss> {
    let (la, mut grad_a) = per_sample_cross_entropy(student_a, labels_a)?;
    let (lb, mut grad_b) = per_sample_cross_entropy(student_b, labels_b)?;
    grad_b *= config.lambda_b;
    let supervised = la.sum() + config.lambda_b * lb.sum();
    let mut l_vs = 0.0;
    let mut l_is = 0.0;
    if let Some(t) = vanilla_a {
        let (l, g) = per_sample_kl(t, student_a, config.tau)?;
        l_vs = l.sum();
        grad_a = grad_a + g * mu;
    }
    if let Some(t) = influence_a {
        let (l, g) = per_sample_kl(t, student_a, config.tau)?;
        l_is = l.sum();
        grad_a = grad_a + g * eta;
    }
    Ok(StudentLoss {
        total: supervised + mu * l_vs + eta * l_is,
        supervised,
        l_vs,
        l_is,
        grad_a,
        grad_b,
    })
}

#[derive(Clone, Debug)]
pub struct VanillaTeacher {
    pub model: MlpModel,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Fits a poison-identification head on clean records plus a capped
/// reservoir of flagged ones.
pub fn train_vanilla_teacher(
    clean: &Array2<f64>,
    flagged: &Array2<f64>,
    config: &DistillConfig,
    seed: u64,
    round: usize,
) -> Result<VanillaTeacher> {
    config.validate()?;
    if clean.nrows() == 0 {
        return Err(Error::config("vanilla_teacher", "no clean records to learn from"));
    }
    let cap = ((clean.nrows() as f64) * config.reservoir_ratio).floor() as usize;
    let keep = crate::influence::spread_indices(flagged.nrows(), cap.min(flagged.nrows()));
    let reservoir = flagged.select(Axis(0), &keep);
    let features = ndarray::concatenate(Axis(0), &[clean.view(), reservoir.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let labels: Vec<usize> = std::iter::repeat_n(0, clean.nrows()).chain(std::iter::repeat_n(1, reservoir.nrows())).collect();
    let mut rng = stream_rng(seed, Stream::Teacher, round as u64, 2);
    let mut model = MlpModel::multi_head(&[clean.ncols(), config.hidden], Activation::Relu, &[(HEAD_A, 2)], &mut rng)?;
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let x = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = model.forward(&x, Some(HEAD_A))?;
            let (l, g) = per_sample_cross_entropy(trace.output(), &y)?;
            sum += l.sum();
            let grads = model.backward(&trace, &(g / chunk.len() as f64))?;
            opt.step(&mut model, &grads)?;
        }
        losses.push(sum / labels.len() as f64);
    }
    Ok(VanillaTeacher { model, losses })
}

#[derive(Clone, Debug)]
pub struct Student {
    pub model: MlpModel,
    pub momentum: MomentumState,
    /// Mean objective per epoch.
    pub losses: Vec<f64>,
}

pub fn build_student(dz: usize, clients: usize, config: &DistillConfig, seed: u64, round: usize) -> Result<MlpModel> {
    let mut rng = stream_rng(seed, Stream::Teacher, round as u64, 3);
    MlpModel::multi_head(&[dz, config.hidden], Activation::Relu, &[(HEAD_A, 2), (HEAD_B, clients)], &mut rng)
}

/// Trains the student. The momentum weights only move, and are only
/// logged, when both teachers are present; a missing teacher's weight is
/// held at zero.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    features: &Array2<f64>,
    labels_a: &[usize],
    labels_b: &[usize],
    clients: usize,
    vanilla: Option<&MlpModel>,
    influence: Option<&MlpModel>,
    config: &DistillConfig,
    seed: u64,
    round: usize,
) -> Result<Student> {
    config.validate()?;
    let n = features.nrows();
    if n == 0 || labels_a.len() != n || labels_b.len() != n {
        return Err(Error::Shape("student needs one poison and one client label per record".into()));
    }
    let mut model = build_student(features.ncols(), clients, config, seed, round)?;
    let mut opt = Adam::new(config.lr);
    let mut state = MomentumState::new(config);
    let adaptive = vanilla.is_some() && influence.is_some();
    let vanilla_logits = vanilla.map(|t| t.predict(features, Some(HEAD_A))).transpose()?;
    let influence_logits = influence.map(|t| t.predict(features, Some(HEAD_A))).transpose()?;
    let mut rng = stream_rng(seed, Stream::Teacher, round as u64, 4);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let x = features.select(Axis(0), chunk);
            let ya: Vec<usize> = chunk.iter().map(|&i| labels_a[i]).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels_b[i]).collect();
            let va = vanilla_logits.as_ref().map(|l| l.select(Axis(0), chunk));
            let ia = influence_logits.as_ref().map(|l| l.select(Axis(0), chunk));
            let ta = model.forward(&x, Some(HEAD_A))?;
            let tb = model.forward(&x, Some(HEAD_B))?;
            if adaptive {
                let vs = per_sample_kl(va.as_ref().expect("adaptive"), ta.output(), config.tau)?.0.sum();
                let is = per_sample_kl(ia.as_ref().expect("adaptive"), ta.output(), config.tau)?.0.sum();
                momentum_update(&mut state, vs, is, config)?;
            }
            let (mu, eta) = match (va.is_some(), ia.is_some()) {
                (true, true) => (state.mu, state.eta),
                (true, false) => (config.mu0, 0.0),
                (false, true) => (0.0, config.eta0),
                (false, false) => (0.0, 0.0),
            };
            let loss = student_loss(ta.output(), tb.output(), &ya, &yb, va.as_ref(), ia.as_ref(), mu, eta, config)?;
            sum += loss.total;
            let m = chunk.len() as f64;
            let mut grads = model.backward(&ta, &(loss.grad_a / m))?;
            grads.add_assign(&model.backward(&tb, &(loss.grad_b / m))?)?;
            opt.step(&mut model, &grads)?;
        }
        losses.push(sum / n as f64);
    }
    Ok(Student {
        model,
        momentum: state,
        losses,
    })
}
