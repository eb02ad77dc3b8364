//! Poisoning attacks against the split pipeline.
//!
//! Label (LP) and input (DP) poisoning act on the client batch before the
//! forward pass, smashed-data poisoning (SP) and the adaptive evasion act on
//! the records after it, and weight poisoning (WP) acts on the client model
//! before aggregation.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::column_std;
use crate::error::{Error, Result};
use crate::nn::MlpModel;
use crate::rng::{stream_rng, Stream};
use crate::sfl::{feature_matrix, Batch, SmashedRecord};

/// Which of the four attack vectors are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttackMask {
    pub label: bool,
    pub input: bool,
    pub smashed: bool,
    pub weight: bool,
}

impl AttackMask {
    pub const NONE: AttackMask = AttackMask {
        label: false,
        input: false,
        smashed: false,
        weight: false,
    };

    pub fn any(&self) -> bool {
        self.label || self.input || self.smashed || self.weight
    }
}

impl fmt::Display for AttackMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.label, "LP"),
            (self.input, "DP"),
            (self.smashed, "SP"),
            (self.weight, "WP"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for AttackMask {
    type Err = Error;

    /// Parses `"none"` or a `+`-separated list such as `"DP+SP"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = AttackMask::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(mask);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "LP" => mask.label = true,
                "DP" => mask.input = true,
                "SP" => mask.smashed = true,
                "WP" => mask.weight = true,
                other => {
                    return Err(Error::config("attack", format!("unknown attack `{other}`")))
                }
            }
        }
        Ok(mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `theta' = theta - c * theta`
    SignFlip,
    /// Gaussian perturbation with norm about `c * ||theta||`.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveMode {
    /// One convex step toward the clean-neighbour mean.
    OneShot,
    /// `attack_epochs` steps of size `attack_lr * strength`, re-querying
    /// neighbours every step.
    Iterative,
}

/// Full description of what a malicious client does.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub mask: AttackMask,
    pub label_shift: usize,
    pub input_scale: f64,
    pub smashed_scale: f64,
    pub weight_scale: f64,
    pub weight_mode: WeightMode,
    pub adaptive: bool,
    pub adaptive_strength: f64,
    pub adaptive_k: usize,
    pub adaptive_mode: AdaptiveMode,
    pub attack_epochs: usize,
    pub attack_lr: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            mask: AttackMask {
                input: true,
                smashed: true,
                ..AttackMask::NONE
            },
            label_shift: 1,
            input_scale: 1.0,
            smashed_scale: 1.0,
            weight_scale: 2.0,
            weight_mode: WeightMode::SignFlip,
            adaptive: false,
            adaptive_strength: 0.5,
            adaptive_k: 10,
            adaptive_mode: AdaptiveMode::OneShot,
            attack_epochs: 100,
            attack_lr: 0.01,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_scale", self.input_scale),
            ("smashed_scale", self.smashed_scale),
            ("weight_scale", self.weight_scale),
            ("attack_lr", self.attack_lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.adaptive_strength) {
            return Err(Error::config(
                "adaptive_strength",
                format!("must be in [0, 1], got {}", self.adaptive_strength),
            ));
        }
        if self.adaptive && self.adaptive_k == 0 {
            return Err(Error::config("adaptive_k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Where an attacked client stands in the protocol; keys its noise streams.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackContext {
    pub seed: u64,
    pub client_id: usize,
    pub round: usize,
    pub classes: usize,
    /// Per-feature standard deviation of the client's raw inputs.
    pub input_std: Vec<f64>,
}

/// `y' = (y + shift) mod C`.
pub fn poison_labels(batch: &mut Batch, shift: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {classes}")));
    }
    for (y, p) in batch.labels.iter_mut().zip(batch.poisoned.iter_mut()) {
        *y = (*y + shift) % classes;
        *p = true;
    }
    Ok(())
}

fn gaussian_noise<R: Rng + ?Sized>(m: &mut Array2<f64>, scale: f64, std: &[f64], rng: &mut R) {
    for mut row in m.rows_mut() {
        for (v, s) in row.iter_mut().zip(std) {
            let e: f64 = rng.sample(StandardNormal);
            *v += scale * s * e;
        }
    }
}

/// Adds `N(0, (scale * std_j)^2)` noise to every input feature `j`.
pub fn poison_inputs<R: Rng + ?Sized>(
    batch: &mut Batch,
    scale: f64,
    feature_std: &[f64],
    rng: &mut R,
) -> Result<()> {
    if feature_std.len() != batch.features.ncols() {
        return Err(Error::Shape("feature std length does not match inputs".into()));
    }
    if scale > 0.0 {
        gaussian_noise(&mut batch.features, scale, feature_std, rng);
    }
    batch.poisoned.iter_mut().for_each(|p| *p = true);
    Ok(())
}

/// Adds `N(0, (scale * std_j)^2)` noise to every smashed feature `j`. The
/// records are marked poisoned even at zero scale.
pub fn poison_smashed<R: Rng + ?Sized>(
    records: &mut [SmashedRecord],
    scale: f64,
    feature_std: &[f64],
    rng: &mut R,
) -> Result<()> {
    for r in records.iter_mut() {
        if r.features.len() != feature_std.len() {
            return Err(Error::Shape("feature std length does not match smashed width".into()));
        }
        if scale > 0.0 {
            for (v, s) in r.features.iter_mut().zip(feature_std) {
                let e: f64 = rng.sample(StandardNormal);
                *v += scale * s * e;
            }
        }
        r.poison_truth = true;
    }
    Ok(())
}

pub fn poison_weights<R: Rng + ?Sized>(
    model: &mut MlpModel,
    scale: f64,
    mode: WeightMode,
    rng: &mut R,
) -> Result<()> {
    if scale == 0.0 {
        return Ok(());
    }
    match mode {
        WeightMode::SignFlip => model.map_params(|p| *p -= scale * *p),
        WeightMode::Gaussian => {
            let params = model.flat_params();
            let norm = params.iter().map(|v| v * v).sum::<f64>().sqrt();
            let per = scale * norm / (params.len().max(1) as f64).sqrt();
            model.map_params(|p| {
                let e: f64 = rng.sample(StandardNormal);
                *p += per * e;
            })
        }
    }
}

fn neighbour_mean(reference: &Array2<f64>, z: &[f64], k: usize) -> Vec<f64> {
    let mut dists: Vec<(f64, usize)> = reference
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    let k = k.min(dists.len());
    dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut mean = vec![0.0; z.len()];
    for &(_, i) in &dists[..k] {
        for (m, v) in mean.iter_mut().zip(reference.row(i)) {
            *m += v / k as f64;
        }
    }
    mean
}

/// Moves each poisoned record toward the mean of its `k` nearest clean
/// reference vectors: `z <- (1 - strength) z + strength * mean`.
pub fn adaptive_tas_evasion(
    records: &mut [SmashedRecord],
    clean_reference: &Array2<f64>,
    strength: f64,
    k: usize,
) -> Result<()> {
    if clean_reference.nrows() == 0 {
        return Err(Error::config("adaptive", "clean reference set is empty"));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::config("adaptive_strength", format!("must be in [0, 1], got {strength}")));
    }
    if strength == 0.0 {
        return Ok(());
    }
    for r in records.iter_mut().filter(|r| r.poison_truth) {
        let mean = neighbour_mean(clean_reference, &r.features, k.max(1));
        for (v, m) in r.features.iter_mut().zip(&mean) {
            *v = (1.0 - strength) * *v + strength * m;
        }
    }
    Ok(())
}

fn adaptive_iterative(
    records: &mut [SmashedRecord],
    clean_reference: &Array2<f64>,
    spec: &AttackSpec,
) -> Result<()> {
    if clean_reference.nrows() == 0 {
        return Err(Error::config("adaptive", "clean reference set is empty"));
    }
    let step = (spec.attack_lr * spec.adaptive_strength).min(1.0);
    for _ in 0..spec.attack_epochs {
        for r in records.iter_mut().filter(|r| r.poison_truth) {
            let mean = neighbour_mean(clean_reference, &r.features, spec.adaptive_k.max(1));
            for (v, m) in r.features.iter_mut().zip(&mean) {
                *v += step * (m - *v);
            }
        }
    }
    Ok(())
}

/// Artifacts an attack may touch; stages with absent artifacts are skipped.
#[derive(Debug, Default)]
pub struct Artifacts<'a> {
    pub batch: Option<&'a mut Batch>,
    pub records: Option<&'a mut Vec<SmashedRecord>>,
    pub model: Option<&'a mut MlpModel>,
}

/// Applies every flagged attack to the artifacts present, in pipeline
/// order LP, DP, SP (then adaptive evasion), WP.
pub fn apply_multi(spec: &AttackSpec, ctx: &AttackContext, artifacts: Artifacts<'_>) -> Result<()> {
    let round = ctx.round as u64;
    let client = ctx.client_id as u64;
    if let Some(batch) = artifacts.batch {
        if spec.mask.label {
            poison_labels(batch, spec.label_shift, ctx.classes)?;
        }
        if spec.mask.input {
            let mut rng = stream_rng(ctx.seed, Stream::InputNoise, client, round);
            poison_inputs(batch, spec.input_scale, &ctx.input_std, &mut rng)?;
        }
    }
    if let Some(records) = artifacts.records {
        if spec.mask.smashed || spec.adaptive {
            let clean = feature_matrix(records);
            if spec.mask.smashed {
                let std = column_std(&clean);
                let mut rng = stream_rng(ctx.seed, Stream::SmashedNoise, client, round);
                poison_smashed(records, spec.smashed_scale, &std, &mut rng)?;
            }
            if spec.adaptive {
                match spec.adaptive_mode {
                    AdaptiveMode::OneShot => adaptive_tas_evasion(
                        records,
                        &clean,
                        spec.adaptive_strength,
                        spec.adaptive_k,
                    )?,
                    AdaptiveMode::Iterative => adaptive_iterative(records, &clean, spec)?,
                }
            }
        }
    }
    if let Some(model) = artifacts.model {
        if spec.mask.weight {
            let mut rng = stream_rng(ctx.seed, Stream::WeightNoise, client, round);
            poison_weights(model, spec.weight_scale, spec.weight_mode, &mut rng)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, d: usize) -> Batch {
        let feats = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64 * 0.1);
        Batch::new((0..n).collect(), feats, (0..n).map(|i| i % 10).collect())
    }

    fn records(n: usize, d: usize) -> Vec<SmashedRecord> {
        (0..n)
            .map(|i| SmashedRecord {
                sample_id: i,
                client_id: 0,
                features: (0..d).map(|j| ((i * 7 + j * 3) % 11) as f64).collect(),
                label: i % 3,
                poison_truth: false,
            })
            .collect()
    }

    #[test]
    fn mask_parsing_and_display() {
        let m: AttackMask = "DP+SP".parse().unwrap();
        assert!(m.input && m.smashed && !m.label && !m.weight);
        assert_eq!(m.to_string(), "DP+SP");
        assert_eq!("none".parse::<AttackMask>().unwrap(), AttackMask::NONE);
        assert!("XP".parse::<AttackMask>().is_err());
    }

    #[test]
    fn label_shift_wraps() {
        let mut b = batch(10, 2);
        poison_labels(&mut b, 0, 10).unwrap();
        assert_eq!(b.labels, (0..10).collect::<Vec<_>>());
        poison_labels(&mut b, 10, 10).unwrap();
        assert_eq!(b.labels, (0..10).collect::<Vec<_>>());
        poison_labels(&mut b, 1, 10).unwrap();
        assert_eq!(b.labels[9], 0);
        assert_eq!(b.labels[3], 4);
        assert!(poison_labels(&mut b, 1, 1).is_err());
    }

    #[test]
    fn zero_input_noise_is_identity() {
        let mut b = batch(4, 3);
        let before = b.features.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        poison_inputs(&mut b, 0.0, &[1.0; 3], &mut rng).unwrap();
        assert_eq!(b.features, before);
    }

    #[test]
    fn input_noise_std_matches_scale() {
        let n = 2000;
        let mut b = Batch::new((0..n).collect(), Array2::zeros((n, 2)), vec![0; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        poison_inputs(&mut b, 0.5, &[2.0, 4.0], &mut rng).unwrap();
        let std = column_std(&b.features);
        assert!((std[0] - 1.0).abs() < 0.1);
        assert!((std[1] - 2.0).abs() < 0.2);
    }

    #[test]
    fn client_streams_differ() {
        let spec = AttackSpec::default();
        let mk = |client| AttackContext {
            seed: 1,
            client_id: client,
            round: 0,
            classes: 10,
            input_std: vec![1.0; 3],
        };
        let (mut a, mut b) = (batch(5, 3), batch(5, 3));
        apply_multi(&spec, &mk(0), Artifacts { batch: Some(&mut a), ..Default::default() }).unwrap();
        apply_multi(&spec, &mk(1), Artifacts { batch: Some(&mut b), ..Default::default() }).unwrap();
        assert_ne!(a.features, b.features);
    }

    #[test]
    fn zero_smashed_noise_still_marks_records() {
        let mut r = records(5, 3);
        let before: Vec<_> = r.iter().map(|x| x.features.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        poison_smashed(&mut r, 0.0, &[1.0; 3], &mut rng).unwrap();
        assert!(r.iter().all(|x| x.poison_truth));
        assert_eq!(r.iter().map(|x| x.features.clone()).collect::<Vec<_>>(), before);
    }

    #[test]
    fn smashed_noise_norm_follows_chi_distribution() {
        let d = 8;
        let mut r: Vec<SmashedRecord> = (0..1000)
            .map(|i| SmashedRecord {
                sample_id: i,
                client_id: 0,
                features: vec![0.0; d],
                label: 0,
                poison_truth: false,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        poison_smashed(&mut r, 3.0, &vec![0.5; d], &mut rng).unwrap();
        let mean_norm: f64 = r
            .iter()
            .map(|x| x.features.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / 1000.0;
        // E[chi_8] = sqrt(2) * Gamma(4.5) / Gamma(4), scaled by 3 * 0.5
        let gamma_4_5 = 3.5 * 2.5 * 1.5 * 0.5 * std::f64::consts::PI.sqrt();
        let expected = 1.5 * std::f64::consts::SQRT_2 * gamma_4_5 / 6.0;
        assert!((mean_norm - expected).abs() / expected < 0.03, "{mean_norm} vs {expected}");
    }

    #[test]
    fn weight_poisoning_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base =
            MlpModel::from_widths(&[3, 4], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut m = base.clone();
        poison_weights(&mut m, 0.0, WeightMode::SignFlip, &mut rng).unwrap();
        assert_eq!(m.flat_params(), base.flat_params());
        poison_weights(&mut m, 2.0, WeightMode::SignFlip, &mut rng).unwrap();
        for (a, b) in m.flat_params().iter().zip(base.flat_params()) {
            assert_eq!(*a, -b);
        }
        let mut g = base.clone();
        poison_weights(&mut g, 1.0, WeightMode::Gaussian, &mut rng).unwrap();
        assert_ne!(g.flat_params(), base.flat_params());
    }

    #[test]
    fn empty_mask_is_noop() {
        let spec = AttackSpec {
            mask: AttackMask::NONE,
            ..AttackSpec::default()
        };
        let ctx = AttackContext {
            seed: 0,
            client_id: 0,
            round: 0,
            classes: 10,
            input_std: vec![1.0; 2],
        };
        let mut b = batch(3, 2);
        let mut r = records(3, 2);
        let (b0, r0) = (b.clone(), r.clone());
        apply_multi(
            &spec,
            &ctx,
            Artifacts {
                batch: Some(&mut b),
                records: Some(&mut r),
                model: None,
            },
        )
        .unwrap();
        assert_eq!(b, b0);
        assert_eq!(r, r0);
    }

    #[test]
    fn evasion_endpoints() {
        let reference = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64);
        let mut r = records(3, 2);
        r.iter_mut().for_each(|x| x.poison_truth = true);
        let before = r.clone();
        adaptive_tas_evasion(&mut r, &reference, 0.0, 2).unwrap();
        assert_eq!(r, before);
        adaptive_tas_evasion(&mut r, &reference, 1.0, 2).unwrap();
        for (after, orig) in r.iter().zip(&before) {
            assert_eq!(after.features, neighbour_mean(&reference, &orig.features, 2));
        }
        assert!(adaptive_tas_evasion(&mut r, &Array2::zeros((0, 2)), 0.5, 2).is_err());
    }
}
