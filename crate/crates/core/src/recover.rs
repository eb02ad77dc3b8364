//! Generative repair of flagged records.
//!
//! One small GAN per class learns the distribution of the round's clean
//! smashed features. Flagged records get synthetic replacements of their
//! own class, subject to a confidence and label-consistency gate.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax_rows, binary_logit_loss, sigmoid, softmax, Activation, Adam, MlpModel};
use crate::rng::{stream_rng, Stream};
use crate::sfl::SmashedRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub min_samples: usize,
    /// Real samples per discriminator step; the whole class when larger.
    pub batch: usize,
    /// Decay of the generator weight average used for sampling; 0 samples
    /// the raw generator.
    pub ema: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 16,
            hidden: 64,
            lr: 1e-3,
            steps: 200,
            min_samples: 16,
            batch: 64,
            ema: 0.98,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.hidden == 0 {
            return Err(Error::config("gan_hidden", "layer widths must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("gan_lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::config("gan_ema", format!("must lie in [0,1), got {}", self.ema)));
        }
        if self.min_samples < 2 || self.batch == 0 {
            return Err(Error::config("gan_min_samples", "need at least 2 samples and a positive batch"));
        }
        Ok(())
    }
}

/// Generator/discriminator pair for one class. Both work on standardized
/// features; `mean` and `scale` map back to smashed space.
#[derive(Clone, Debug)]
pub struct ClassGan {
    pub generator: MlpModel,
    /// Running average of generator weights; samples come from here.
    pub averaged: MlpModel,
    ema: f64,
    pub discriminator: MlpModel,
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub samples: usize,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
    g_opt: Adam,
    d_opt: Adam,
}

impl ClassGan {
    pub fn new<R: Rng + ?Sized>(data: &Array2<f64>, config: &GanConfig, rng: &mut R) -> Result<Self> {
        let dz = data.ncols();
        let mean = data.mean_axis(Axis(0)).ok_or_else(|| Error::Domain("empty class".into()))?;
        let scale = data.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        let generator = MlpModel::from_widths(
            &[config.noise_dim, config.hidden, dz],
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let discriminator =
            MlpModel::from_widths(&[dz, config.hidden, 1], Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            averaged: generator.clone(),
            ema: config.ema,
            generator,
            discriminator,
            mean,
            scale,
            samples: data.nrows(),
            d_losses: Vec::new(),
            g_losses: Vec::new(),
            g_opt: Adam::new(config.lr),
            d_opt: Adam::new(config.lr),
        })
    }

    pub fn standardize(&self, z: &Array2<f64>) -> Array2<f64> {
        (z - &self.mean) / &self.scale
    }

    pub fn noise<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Array2<f64> {
        let dim = self.generator.input_dim();
        Array2::from_shape_fn((count, dim), |_| rng.sample(StandardNormal))
    }

    /// Samples in standardized space.
    fn fake(&self, noise: &Array2<f64>) -> Result<Array2<f64>> {
        self.generator.predict(noise, None)
    }

    /// Discriminator probability that `z` (smashed space) is real.
    pub fn discriminate(&self, z: &Array2<f64>) -> Result<Vec<f64>> {
        let logits = self.discriminator.predict(&self.standardize(z), None)?;
        Ok(logits.column(0).iter().map(|&l| sigmoid(l)).collect())
    }

    /// One update of `−E[log D(z)] − E[log(1 − D(z̃))]`; returns the loss
    /// before the update. Inputs are standardized.
    pub fn discriminator_step(&mut self, real: &Array2<f64>, fake: &Array2<f64>) -> Result<f64> {
        let real_trace = self.discriminator.forward(real, None)?;
        let fake_trace = self.discriminator.forward(fake, None)?;
        let (lr, gr) = binary_logit_loss(real_trace.output(), true);
        let (lf, gf) = binary_logit_loss(fake_trace.output(), false);
        let mut grads = self.discriminator.backward(&real_trace, &gr)?;
        grads.add_assign(&self.discriminator.backward(&fake_trace, &gf)?)?;
        self.d_opt.step(&mut self.discriminator, &grads)?;
        self.d_losses.push(lr + lf);
        Ok(lr + lf)
    }

    /// One update of `−E[log D(G(n))]`; returns the loss before the update.
    pub fn generator_step(&mut self, noise: &Array2<f64>) -> Result<f64> {
        let g_trace = self.generator.forward(noise, None)?;
        let d_trace = self.discriminator.forward(g_trace.output(), None)?;
        let (loss, grad) = binary_logit_loss(d_trace.output(), true);
        let through = self.discriminator.backward(&d_trace, &grad)?;
        let input_grad = through.input.expect("backward fills the input gradient");
        let grads = self.generator.backward(&g_trace, &input_grad)?;
        self.g_opt.step(&mut self.generator, &grads)?;
        let current = self.generator.flat_params();
        let decay = self.ema;
        let mut averaged = self.averaged.flat_params();
        for (a, c) in averaged.iter_mut().zip(&current) {
            *a = decay * *a + (1.0 - decay) * c;
        }
        self.averaged.set_flat_params(&averaged)?;
        self.g_losses.push(loss);
        Ok(loss)
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Array2<f64>> {
        if count == 0 {
            return Ok(Array2::zeros((0, self.mean.len())));
        }
        let noise = self.noise(count, rng);
        Ok(self.averaged.predict(&noise, None)? * &self.scale + &self.mean)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GanState {
    pub classes: BTreeMap<usize, ClassGan>,
    pub untrainable: Vec<usize>,
}

impl GanState {
    pub fn is_trainable(&self, class: usize) -> bool {
        self.classes.contains_key(&class)
    }
}

/// Groups records' features by label.
pub fn group_by_class(records: &[SmashedRecord]) -> BTreeMap<usize, Array2<f64>> {
    let mut rows: BTreeMap<usize, Vec<&SmashedRecord>> = BTreeMap::new();
    for r in records {
        rows.entry(r.label).or_default().push(r);
    }
    rows.into_iter()
        .map(|(c, rs)| {
            let d = rs[0].features.len();
            let flat: Vec<f64> = rs.iter().flat_map(|r| r.features.iter().copied()).collect();
            (c, Array2::from_shape_vec((rs.len(), d), flat).expect("uniform feature width"))
        })
        .collect()
}

pub fn train_gan(
    clean: &BTreeMap<usize, Array2<f64>>,
    config: &GanConfig,
    seed: u64,
    round: usize,
) -> Result<GanState> {
    config.validate()?;
    let mut state = GanState::default();
    for (&class, data) in clean {
        if data.nrows() < config.min_samples {
            state.untrainable.push(class);
            continue;
        }
        let mut rng = stream_rng(seed, Stream::Gan, round as u64, class as u64);
        let mut gan = ClassGan::new(data, config, &mut rng)?;
        let real_all = gan.standardize(data);
        let batch = config.batch.min(data.nrows());
        for _ in 0..config.steps {
            let real = if batch == data.nrows() {
                real_all.clone()
            } else {
                let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.nrows())).collect();
                real_all.select(Axis(0), &rows)
            };
            let noise = gan.noise(batch, &mut rng);
            let fake = gan.fake(&noise)?;
            gan.discriminator_step(&real, &fake)?;
            let noise = gan.noise(batch, &mut rng);
            gan.generator_step(&noise)?;
        }
        state.classes.insert(class, gan);
    }
    if state.classes.is_empty() {
        warn!("no class has enough clean records for generative repair this round");
    }
    Ok(state)
}

pub fn generate_candidates<R: Rng + ?Sized>(
    gan: &GanState,
    class: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let g = gan.classes.get(&class).ok_or(Error::RecoveryUnavailable(class))?;
    Ok(g.sample(count, rng)?.outer_iter().map(|r| r.to_vec()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub tau_conf: f64,
    pub budget: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau_conf: 0.9, budget: 8 }
    }
}

/// Models consulted by the substitution gate. A missing model disables
/// its check.
#[derive(Clone, Copy, Debug)]
pub struct Validator<'a> {
    /// Poison head `a`; class 0 means clean.
    pub student: Option<&'a MlpModel>,
    /// Category head `c`.
    pub ad_teacher: Option<&'a MlpModel>,
    pub tau_conf: f64,
}

pub const POISON_HEAD: &str = "a";
pub const CATEGORY_HEAD: &str = "c";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GateVerdict {
    Accept { confidence: f64 },
    LowConfidence { confidence: f64 },
    LabelMismatch { predicted: usize },
}

impl GateVerdict {
    pub fn accepted(&self) -> bool {
        matches!(self, GateVerdict::Accept { .. })
    }
}

pub fn validate_substitute(validator: &Validator<'_>, candidate: &[f64], target: usize) -> Result<GateVerdict> {
    let z = Array2::from_shape_vec((1, candidate.len()), candidate.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let confidence = match validator.student {
        Some(student) => softmax(&student.predict(&z, Some(POISON_HEAD))?, 1.0)[[0, 0]],
        None => 1.0,
    };
    if let Some(teacher) = validator.ad_teacher {
        let predicted = argmax_rows(&teacher.predict(&z, Some(CATEGORY_HEAD))?)[0];
        if predicted != target {
            return Ok(GateVerdict::LabelMismatch { predicted });
        }
    }
    if confidence < validator.tau_conf {
        return Ok(GateVerdict::LowConfidence { confidence });
    }
    Ok(GateVerdict::Accept { confidence })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Outcome {
    Kept,
    Replaced { tried: usize, confidence: f64 },
    Dropped { tried: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SubstitutionReport {
    /// One outcome per input record, in input order.
    pub outcomes: Vec<Outcome>,
}

impl SubstitutionReport {
    pub fn replaced(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o, Outcome::Replaced { .. })).count()
    }

    pub fn dropped(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o, Outcome::Dropped { .. })).count()
    }

    pub fn kept(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o, Outcome::Kept)).count()
    }

    pub fn candidates_tried(&self) -> usize {
        self.outcomes
            .iter()
            .map(|o| match o {
                Outcome::Kept => 0,
                Outcome::Replaced { tried, .. } | Outcome::Dropped { tried } => *tried,
            })
            .sum()
    }

    pub fn mean_confidence(&self) -> f64 {
        let c: Vec<f64> = self
            .outcomes
            .iter()
            .filter_map(|o| match o {
                Outcome::Replaced { confidence, .. } => Some(*confidence),
                _ => None,
            })
            .collect();
        if c.is_empty() {
            0.0
        } else {
            c.iter().sum::<f64>() / c.len() as f64
        }
    }
}

/// Replaces or drops every masked record. Unmasked records pass through.
pub fn substitute<R: Rng + ?Sized>(
    records: &[SmashedRecord],
    mask: &[bool],
    gan: &GanState,
    validator: &Validator<'_>,
    budget: usize,
    rng: &mut R,
) -> Result<(Vec<SmashedRecord>, SubstitutionReport)> {
    if mask.len() != records.len() {
        return Err(Error::Shape(format!("mask of {} for {} records", mask.len(), records.len())));
    }
    let mut out = Vec::with_capacity(records.len());
    let mut report = SubstitutionReport::default();
    for (record, &flagged) in records.iter().zip(mask) {
        if !flagged {
            out.push(record.clone());
            report.outcomes.push(Outcome::Kept);
            continue;
        }
        let candidates = match generate_candidates(gan, record.label, budget, rng) {
            Ok(c) => c,
            Err(Error::RecoveryUnavailable(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut outcome = Outcome::Dropped { tried: candidates.len() };
        for (i, cand) in candidates.into_iter().enumerate() {
            if let GateVerdict::Accept { confidence } = validate_substitute(validator, &cand, record.label)? {
                let mut repaired = record.clone();
                repaired.features = cand;
                out.push(repaired);
                outcome = Outcome::Replaced { tried: i + 1, confidence };
                break;
            }
        }
        report.outcomes.push(outcome);
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cluster(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |(_, j)| {
            let m = if j == 0 { 3.0 } else { -1.0 };
            m + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
    }

    fn record(id: usize, label: usize, features: Vec<f64>) -> SmashedRecord {
        SmashedRecord {
            sample_id: id,
            client_id: 0,
            features,
            label,
            poison_truth: false,
        }
    }

    fn permissive() -> Validator<'static> {
        Validator {
            student: None,
            ad_teacher: None,
            tau_conf: 0.0,
        }
    }

    #[test]
    fn half_probability_losses() {
        let zero = Array2::zeros((5, 1));
        let (real, _) = binary_logit_loss(&zero, true);
        let (fake, _) = binary_logit_loss(&zero, false);
        assert_abs_diff_eq!(real + fake, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(real, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn discriminator_loss_falls_on_separated_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = cluster(64, 1);
        let mut gan = ClassGan::new(&data, &GanConfig::default(), &mut rng).unwrap();
        let real = gan.standardize(&data);
        let fake = Array2::from_elem((64, 2), 6.0);
        let losses: Vec<f64> = (0..10).map(|_| gan.discriminator_step(&real, &fake).unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn generator_matches_first_moment() {
        let data = cluster(128, 2);
        let groups = BTreeMap::from([(0usize, data.clone())]);
        let state = train_gan(&groups, &GanConfig::default(), 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = state.classes[&0].sample(1000, &mut rng).unwrap();
        let real_mean = data.mean_axis(Axis(0)).unwrap();
        let fake_mean = samples.mean_axis(Axis(0)).unwrap();
        let std = data.std_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!((real_mean[j] - fake_mean[j]).abs() <= 0.5 * std[j], "dim {j}");
        }
    }

    #[test]
    fn small_classes_are_untrainable() {
        let groups = BTreeMap::from([(1usize, cluster(5, 1))]);
        let state = train_gan(&groups, &GanConfig::default(), 0, 0).unwrap();
        assert_eq!(state.untrainable, vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(generate_candidates(&state, 1, 3, &mut rng), Err(Error::RecoveryUnavailable(1))));
    }

    #[test]
    fn zero_candidates_and_reproducibility() {
        let groups = BTreeMap::from([(0usize, cluster(32, 4))]);
        let cfg = GanConfig { steps: 5, ..GanConfig::default() };
        let state = train_gan(&groups, &cfg, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_candidates(&state, 0, 0, &mut rng).unwrap().is_empty());
        let a = generate_candidates(&state, 0, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = generate_candidates(&state, 0, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn substitution_outcomes() {
        let groups = BTreeMap::from([(0usize, cluster(32, 4))]);
        let cfg = GanConfig { steps: 5, ..GanConfig::default() };
        let state = train_gan(&groups, &cfg, 0, 0).unwrap();
        let records = vec![
            record(0, 0, vec![1.0, 1.0]),
            record(1, 0, vec![99.0, 99.0]),
            record(2, 3, vec![50.0, 50.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, rep) = substitute(&records, &[false; 3], &state, &permissive(), 8, &mut rng).unwrap();
        assert_eq!(out, records);
        assert_eq!(rep.kept(), 3);

        let (out, rep) =
            substitute(&records, &[false, true, true], &state, &permissive(), 8, &mut rng).unwrap();
        assert_eq!(rep.outcomes[1], Outcome::Replaced { tried: 1, confidence: 1.0 });
        assert_eq!(rep.outcomes[2], Outcome::Dropped { tried: 0 });
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], records[0]);
        assert_eq!((out[1].sample_id, out[1].label), (1, 0));
        assert_ne!(out[1].features, records[1].features);
    }
}
