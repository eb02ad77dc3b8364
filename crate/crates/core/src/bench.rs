//! Benchmark scenarios shared by the command line and the acceptance suite:
//! the desk preset, the detection Monte-Carlo and the gradient-variance
//! scenario.
//!
//! Both scenarios warm a clean system for a few rounds, forward one fixed
//! batch per client and then displace poisoned records explicitly, so the
//! displacement is measured in within-class standard deviations of the
//! clean smashed features rather than in pool-wide units.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::detect::{detect, DetectConfig};
use crate::error::{Error, Result};
use crate::experiment::{build_system, pick_malicious};
use crate::recover::{group_by_class, substitute, train_gan, GanConfig, Validator};
use crate::rng::{stream_rng, Stream};
use crate::sfl::{client_forward, DetectionStats, SmashedRecord, System};
use crate::sgv::{check_theorem, theorem_factor, TheoremCheck};

const DESK: &str = include_str!("../configs/desk.toml");

/// The desk benchmark configuration (seed 0).
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK).expect("bundled desk config parses")
}

pub fn desk_toml() -> &'static str {
    DESK
}

/// Settings common to both scenarios.
#[derive(Clone, Debug, Serialize)]
pub struct ScenarioConfig {
    /// Data, model and optimizer settings; attack and defense keys are ignored.
    pub base: ExperimentConfig,
    /// Clean rounds before the poisoned batch is drawn.
    pub warm_rounds: usize,
    pub records_per_client: usize,
    /// Displacement norm in within-class standard deviations.
    pub displacement: f64,
    /// Share of each malicious client's records that are displaced.
    pub poison_share: f64,
}

impl ScenarioConfig {
    pub fn desk() -> Self {
        Self {
            base: desk_config(),
            warm_rounds: 10,
            records_per_client: 64,
            displacement: 12.0,
            poison_share: 1.0,
        }
    }

    /// Theorem preset: half of each malicious client's records displaced far
    /// out, so every malicious client has the same clean share.
    pub fn theorem() -> Self {
        Self {
            displacement: 20.0,
            poison_share: 0.5,
            ..Self::desk()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.records_per_client < 2 {
            return Err(Error::config("records_per_client", "need at least two records per client"));
        }
        if !(self.displacement >= 0.0 && self.displacement.is_finite()) {
            return Err(Error::config("displacement", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.poison_share) {
            return Err(Error::config("poison_share", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A clean batch of smashed records drawn after warm-up.
#[derive(Clone, Debug)]
pub struct CleanPool {
    pub system: System,
    pub records: Vec<SmashedRecord>,
    pub malicious: Vec<usize>,
}

/// Warms an attack-free system and forwards the first rows of every client.
pub fn clean_pool(scenario: &ScenarioConfig, seed: u64) -> Result<CleanPool> {
    scenario.validate()?;
    let mut config = scenario.base.clone();
    config.seed = seed;
    config.attack = "none".into();
    config.adaptive = false;
    let mut system = build_system(&config)?;
    for _ in 0..scenario.warm_rounds {
        system.run_round(None)?;
    }
    let mut records = Vec::new();
    for client in &system.clients {
        let n = scenario.records_per_client.min(client.train.len());
        let rows: Vec<usize> = (0..n).collect();
        records.extend(client_forward(client, &client.batch(&rows))?.0);
    }
    Ok(CleanPool {
        system,
        records,
        malicious: pick_malicious(&config),
    })
}

/// Root-mean-square within-class standard deviation of the features.
pub fn cluster_std(records: &[SmashedRecord]) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for group in group_by_class(records).values() {
        if group.nrows() < 2 {
            continue;
        }
        let mean = group.mean_axis(ndarray::Axis(0)).expect("non-empty group");
        for row in group.rows() {
            total += row.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>() / row.len() as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (total / count as f64).sqrt()
    }
}

/// Moves each chosen record by `delta * sigma` along a uniform random direction.
pub fn displace<R: Rng + ?Sized>(records: &mut [SmashedRecord], chosen: &[usize], delta: f64, sigma: f64, rng: &mut R) {
    for &i in chosen {
        let r = &mut records[i];
        let dir: Vec<f64> = (0..r.features.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (v, u) in r.features.iter_mut().zip(&dir) {
            *v += delta * sigma * u / norm;
        }
        r.poison_truth = true;
    }
}

/// Indices of the records to poison: the leading share of each malicious
/// client's records.
fn poison_targets(records: &[SmashedRecord], malicious: &[usize], share: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for &m in malicious {
        let own: Vec<usize> = (0..records.len()).filter(|&i| records[i].client_id == m).collect();
        let take = (share * own.len() as f64).round() as usize;
        out.extend(&own[..take.min(own.len())]);
    }
    out
}

fn poisoned_pool(scenario: &ScenarioConfig, seed: u64) -> Result<(CleanPool, f64)> {
    let mut pool = clean_pool(scenario, seed)?;
    let sigma = cluster_std(&pool.records);
    let targets = poison_targets(&pool.records, &pool.malicious, scenario.poison_share);
    let mut rng = stream_rng(seed, Stream::Scenario, 2, 0);
    displace(&mut pool.records, &targets, scenario.displacement, sigma, &mut rng);
    Ok((pool, sigma))
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectTrial {
    pub seed: u64,
    pub cluster_std: f64,
    pub stats: DetectionStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct DetectBenchReport {
    pub trials: Vec<DetectTrial>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub wall_ms: u128,
}

/// Detection-only Monte-Carlo: one poisoned pool per seed, scored against truth.
pub fn detect_bench(scenario: &ScenarioConfig, detect_config: &DetectConfig, seeds: &[u64]) -> Result<DetectBenchReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let start = Instant::now();
    let mut trials = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (pool, sigma) = poisoned_pool(scenario, seed)?;
        let detection = detect(&pool.records, detect_config)?;
        let flagged: Vec<usize> = detection
            .poisoned_indices()
            .into_iter()
            .map(|i| pool.records[i].sample_id)
            .collect();
        trials.push(DetectTrial {
            seed,
            cluster_std: sigma,
            stats: DetectionStats::score(&pool.records, &flagged),
        });
    }
    let n = trials.len() as f64;
    let mean = |f: fn(&DetectionStats) -> f64| trials.iter().map(|t| f(&t.stats)).sum::<f64>() / n;
    Ok(DetectBenchReport {
        mean_precision: mean(|s| s.precision),
        mean_recall: mean(|s| s.recall),
        mean_f1: mean(|s| s.f1),
        trials,
        wall_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoremTrial {
    pub seed: u64,
    /// Clean and poisoned record counts on the malicious clients.
    pub clean: usize,
    pub poisoned: usize,
    pub replaced: usize,
    pub dropped: usize,
    pub check: TheoremCheck,
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoremReport {
    /// Factor for alpha 0.2, M 80, M̂ 20.
    pub reference_factor: f64,
    pub trials: Vec<TheoremTrial>,
    pub holds: usize,
    pub wall_ms: u128,
}

/// Detect, fit the per-class generators on the clean side and substitute
/// every flagged record with a permissive gate; compare gradient variance
/// on the server before and after.
pub fn theorem_scenario(
    scenario: &ScenarioConfig,
    detect_config: &DetectConfig,
    gan: &GanConfig,
    seeds: &[u64],
) -> Result<TheoremReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let start = Instant::now();
    let mut trials = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (pool, _) = poisoned_pool(scenario, seed)?;
        let records = &pool.records;
        let detection = detect(records, detect_config)?;
        let clean: Vec<SmashedRecord> = records
            .iter()
            .zip(&detection.mask)
            .filter(|(_, &m)| !m)
            .map(|(r, _)| r.clone())
            .collect();
        let state = train_gan(&group_by_class(&clean), gan, seed, 0)?;
        let permissive = Validator {
            student: None,
            ad_teacher: None,
            tau_conf: 0.0,
        };
        let mut rng = stream_rng(seed, Stream::Candidates, 0, 0);
        let (after, report) = substitute(records, &detection.mask, &state, &permissive, 1, &mut rng)?;
        let on_malicious = |r: &&SmashedRecord| pool.malicious.contains(&r.client_id);
        let poisoned = records.iter().filter(on_malicious).filter(|r| r.poison_truth).count();
        let clean_count = records.iter().filter(on_malicious).count() - poisoned;
        let alpha = pool.malicious.len() as f64 / pool.system.clients.len() as f64;
        let check = check_theorem(
            records,
            &after,
            alpha,
            clean_count as f64,
            poisoned as f64,
            &pool.system.server.model,
        )?;
        trials.push(TheoremTrial {
            seed,
            clean: clean_count,
            poisoned,
            replaced: report.replaced(),
            dropped: report.dropped(),
            check,
        });
    }
    Ok(TheoremReport {
        reference_factor: theorem_factor(0.2, 80.0, 20.0)?,
        holds: trials.iter().filter(|t| t.check.holds).count(),
        trials,
        wall_ms: start.elapsed().as_millis(),
    })
}
