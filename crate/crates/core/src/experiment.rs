//! End-to-end experiments: data, partitions, the simulator and the
//! defense wired together, one metrics row per round.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{DatasetKind, DefenseMode, ExperimentConfig};
use crate::data::{load_idx, make_synthetic_dataset, partition, Dataset, SyntheticSpec};
use crate::detect::{detect, write_score_dump};
use crate::distill::{train_student, train_vanilla_teacher};
use crate::error::{Error, Result};
use crate::influence::{train_ad_teacher, TaskBatch};
use crate::nn::{Activation, MlpModel, Velocity};
use crate::recover::{group_by_class, substitute, train_gan, GanState, Validator};
use crate::rng::{stream_rng, Stream};
use crate::sfl::{
    feature_matrix, ClientState, DefenseHook, DefenseOutput, HookContext, RoundReport, ServerState, SflConfig,
    SmashedRecord, SubstitutionCounts, System,
};

pub const METRICS_SCHEMA: u32 = 1;

/// Train and test sets before partitioning.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match config.dataset {
        DatasetKind::Synthetic => {
            let spec = SyntheticSpec {
                classes: config.classes,
                dim: config.dim,
                per_class: config.per_class,
                spread: config.spread,
                separation: config.separation,
            };
            let train = make_synthetic_dataset(&spec, config.seed, 0)?;
            let test = make_synthetic_dataset(
                &SyntheticSpec {
                    per_class: config.test_per_class,
                    ..spec
                },
                config.seed,
                1,
            )?;
            Ok((train, test))
        }
        DatasetKind::Idx => {
            let path = |p: &Option<String>| PathBuf::from(p.as_deref().unwrap_or_default());
            let train = load_idx(&path(&config.idx_train_images), &path(&config.idx_train_labels), config.downsample)?;
            let test = load_idx(&path(&config.idx_test_images), &path(&config.idx_test_labels), config.downsample)?;
            if train.classes > config.classes || test.classes > config.classes {
                return Err(Error::config("classes", "IDX labels exceed the configured class count"));
            }
            let retag = |d: Dataset| Dataset::new(d.features, d.labels, config.classes);
            Ok((retag(train)?, retag(test)?))
        }
    }
}

/// Indices of the malicious clients.
pub fn pick_malicious(config: &ExperimentConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..config.clients).collect();
    let mut rng = stream_rng(config.seed, Stream::Scenario, 0, 0);
    ids.shuffle(&mut rng);
    let mut chosen = ids[..config.malicious_count().min(config.clients)].to_vec();
    chosen.sort_unstable();
    chosen
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(hidden);
    w.push(output);
    w
}

pub fn build_system(config: &ExperimentConfig) -> Result<System> {
    config.validate()?;
    let (train, test) = load_datasets(config)?;
    let train_parts = partition(&train.labels, config.classes, config.clients, config.non_iid_q, config.seed)?;
    let test_parts = partition(
        &test.labels,
        config.classes,
        config.clients,
        config.non_iid_q,
        config.seed ^ 0x7e57,
    )?;
    let mut rng = stream_rng(config.seed, Stream::ModelInit, 0, 0);
    let client_model = MlpModel::from_widths(
        &widths(train.dim(), &config.client_hidden, config.bottleneck),
        Activation::Relu,
        Activation::Identity,
        &mut rng,
    )?;
    let server_model = MlpModel::from_widths(
        &widths(config.bottleneck, &config.server_hidden, config.classes),
        Activation::Relu,
        Activation::Identity,
        &mut rng,
    )?;
    let malicious = pick_malicious(config);
    let attack = config.attack_spec()?;
    let attacking = attack.mask.any() || attack.adaptive;
    let clients = (0..config.clients)
        .map(|id| ClientState {
            id,
            model: client_model.clone(),
            velocity: Velocity::default(),
            train: train.subset(&train_parts[id]),
            train_ids: train_parts[id].clone(),
            test: test.subset(&test_parts[id]),
            attack: (attacking && malicious.contains(&id)).then(|| attack.clone()),
        })
        .collect();
    let sfl = SflConfig {
        seed: config.seed,
        classes: config.classes,
        lr: config.lr,
        momentum: config.momentum,
        grad_clip: config.grad_clip,
        batch_size: config.batch_size,
        local_epochs: config.local_epochs,
        aggregator: config.aggregator_kind()?,
        robust_percent: config.robust_param,
        server_replicas: config.server_replicas,
        scope: config.pool_scope,
        participation: config.participation / 100.0,
        track_sgv: config.track_sgv,
    };
    System::new(sfl, clients, ServerState::new(server_model))
}

/// The full defense as a round hook: detect, refresh the auxiliary models
/// on schedule, then repair flagged records.
pub struct HealSplit {
    config: ExperimentConfig,
    mode: DefenseMode,
    vanilla: Option<MlpModel>,
    ad_teacher: Option<MlpModel>,
    student: Option<MlpModel>,
    gan: Option<(usize, GanState)>,
    last_refresh: Option<usize>,
    /// `(round, μ, η)` for every momentum update.
    pub momentum_log: Vec<(usize, f64, f64)>,
    /// Score dump CSV, when enabled.
    pub score_dump: Option<String>,
}

impl HealSplit {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            mode: config.defense,
            vanilla: None,
            ad_teacher: None,
            student: None,
            gan: None,
            last_refresh: None,
            momentum_log: Vec::new(),
            score_dump: config.dump_scores.then(String::new),
        }
    }

    pub fn student(&self) -> Option<&MlpModel> {
        self.student.as_ref()
    }

    pub fn ad_teacher(&self) -> Option<&MlpModel> {
        self.ad_teacher.as_ref()
    }

    fn refresh_models(&mut self, round: usize, records: &[SmashedRecord], mask: &[bool], scores: &[f64]) -> Result<()> {
        let clean: Vec<usize> = (0..records.len()).filter(|&i| !mask[i]).collect();
        let flagged: Vec<usize> = (0..records.len()).filter(|&i| mask[i]).collect();
        if clean.is_empty() {
            return Ok(());
        }
        let z = feature_matrix(records);
        let poison: Vec<usize> = mask.iter().map(|&m| usize::from(m)).collect();
        let client: Vec<usize> = records.iter().map(|r| r.client_id).collect();
        let seed = self.config.seed;
        let distill = self.config.distill_config();

        self.ad_teacher = if self.mode == DefenseMode::NoAdTeacher {
            None
        } else {
            let batch = TaskBatch {
                features: z.clone(),
                poison: poison.clone(),
                client: client.clone(),
                category: records.iter().map(|r| r.label).collect(),
                clients: self.config.clients,
                classes: self.config.classes,
            };
            let scores: Vec<f64> = scores.iter().map(|s| if s.is_finite() { *s } else { 0.0 }).collect();
            Some(train_ad_teacher(&batch, &scores, &self.config.ad_config(), seed, round)?.model)
        };
        self.vanilla = if self.mode == DefenseMode::NoDistillation {
            None
        } else {
            let pick = |rows: &[usize]| z.select(ndarray::Axis(0), rows);
            Some(train_vanilla_teacher(&pick(&clean), &pick(&flagged), &distill, seed, round)?.model)
        };
        let (vanilla, influence) = match self.mode {
            DefenseMode::NoDistillation => (None, None),
            _ => (self.vanilla.as_ref(), self.ad_teacher.as_ref()),
        };
        let student = train_student(&z, &poison, &client, self.config.clients, vanilla, influence, &distill, seed, round)?;
        self.momentum_log
            .extend(student.momentum.history.iter().map(|&(_, _, mu, eta)| (round, mu, eta)));
        self.student = Some(student.model);
        self.last_refresh = Some(round);
        Ok(())
    }
}

impl DefenseHook for HealSplit {
    fn process(&mut self, ctx: &HookContext, records: Vec<SmashedRecord>) -> Result<DefenseOutput> {
        let cfg = self.config.detect_config();
        if !self.mode.enabled() || ctx.round < self.config.warmup_rounds || records.len() <= cfg.k {
            return Ok(DefenseOutput {
                records,
                ..DefenseOutput::default()
            });
        }
        let detection = detect(&records, &cfg)?;
        if let Some(dump) = &mut self.score_dump {
            let mut buf = Vec::new();
            write_score_dump(&mut buf, ctx.round, &records, &detection, dump.is_empty())?;
            dump.push_str(&String::from_utf8_lossy(&buf));
        }
        let flagged: Vec<usize> = detection.poisoned_indices().iter().map(|&i| records[i].sample_id).collect();

        let due = self
            .last_refresh
            .is_none_or(|r| ctx.round >= r + self.config.refresh_every);
        if due {
            self.refresh_models(ctx.round, &records, &detection.mask, &detection.scores)?;
        }

        let gan_due = self
            .gan
            .as_ref()
            .is_none_or(|(r, _)| ctx.round >= r + self.config.gan_every);
        if gan_due {
            let clean: Vec<SmashedRecord> = records
                .iter()
                .zip(&detection.mask)
                .filter(|(_, &m)| !m)
                .map(|(r, _)| r.clone())
                .collect();
            let state = train_gan(&group_by_class(&clean), &self.config.gan_config(), self.config.seed, ctx.round)?;
            self.gan = Some((ctx.round, state));
        }
        let gan = &self.gan.as_ref().expect("trained above").1;
        let validator = if self.config.gate {
            Validator {
                student: self.student.as_ref(),
                ad_teacher: self.ad_teacher.as_ref(),
                tau_conf: self.config.tau_conf,
            }
        } else {
            Validator {
                student: None,
                ad_teacher: None,
                tau_conf: 0.0,
            }
        };
        let mut rng = stream_rng(self.config.seed, Stream::Candidates, ctx.round as u64, ctx.pool as u64);
        let (repaired, report) = substitute(&records, &detection.mask, gan, &validator, self.config.budget, &mut rng)?;
        let momentum = (self.last_refresh == Some(ctx.round))
            .then(|| self.momentum_log.last().map(|&(_, mu, eta)| (mu, eta)))
            .flatten();
        Ok(DefenseOutput {
            records: repaired,
            flagged: Some(flagged),
            substitution: Some(SubstitutionCounts {
                replaced: report.replaced(),
                dropped: report.dropped(),
                kept: report.kept(),
                mean_confidence: report.mean_confidence(),
            }),
            momentum,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub attack: String,
    pub adaptive: bool,
    pub defense: DefenseMode,
    pub accuracy: f64,
    pub train_loss: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub flagged: Option<usize>,
    pub poisoned: Option<usize>,
    pub replaced: Option<usize>,
    pub dropped: Option<usize>,
    pub kept: Option<usize>,
    pub gate_confidence: Option<f64>,
    pub sgv: Option<f64>,
    pub mu: Option<f64>,
    pub eta: Option<f64>,
}

pub const METRICS_COLUMNS: &str = "round,attack,adaptive,defense,accuracy,train_loss,precision,recall,f1,flagged,poisoned,replaced,dropped,kept,gate_confidence,sgv,mu,eta";

impl MetricsRow {
    pub fn from_report(config: &ExperimentConfig, report: &RoundReport) -> Self {
        let det = report.detection;
        let sub = report.substitution;
        Self {
            round: report.round,
            attack: config.attack.clone(),
            adaptive: config.adaptive,
            defense: config.defense,
            accuracy: report.accuracy,
            train_loss: report.train_loss,
            precision: det.map(|d| d.precision),
            recall: det.map(|d| d.recall),
            f1: det.map(|d| d.f1),
            flagged: det.map(|d| d.flagged),
            poisoned: det.map(|d| d.poisoned),
            replaced: sub.map(|s| s.replaced),
            dropped: sub.map(|s| s.dropped),
            kept: sub.map(|s| s.kept),
            gate_confidence: sub.map(|s| s.mean_confidence),
            sgv: report.sgv,
            mu: report.momentum.map(|m| m.0),
            eta: report.momentum.map(|m| m.1),
        }
    }

    pub fn to_csv(&self) -> String {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let defense = serde_json::to_value(self.defense).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        [
            self.round.to_string(),
            self.attack.clone(),
            u8::from(self.adaptive).to_string(),
            defense,
            self.accuracy.to_string(),
            self.train_loss.to_string(),
            opt(self.precision),
            opt(self.recall),
            opt(self.f1),
            opt(self.flagged),
            opt(self.poisoned),
            opt(self.replaced),
            opt(self.dropped),
            opt(self.kept),
            opt(self.gate_confidence),
            opt(self.sgv),
            opt(self.mu),
            opt(self.eta),
        ]
        .join(",")
    }
}

/// Metrics CSV with the resolved config echoed as `#` comment lines.
pub fn metrics_csv(config: &ExperimentConfig, rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    writeln!(out, "# sflguard metrics schema {METRICS_SCHEMA}").expect("string write");
    for line in config.to_toml().lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    writeln!(out, "{METRICS_COLUMNS}").expect("string write");
    for row in rows {
        writeln!(out, "{}", row.to_csv()).expect("string write");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Mean precision / recall over rounds with detection.
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub momentum_updates: usize,
    pub momentum_in_unit_interval: bool,
    pub wall_ms: u128,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub csv: String,
    pub summary: Summary,
    pub momentum_log: Vec<(usize, f64, f64)>,
    pub score_dump: Option<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let mut system = build_system(config)?;
    let mut defense = HealSplit::new(config);
    let mut rows = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let hook: Option<&mut dyn DefenseHook> = if config.defense.enabled() { Some(&mut defense) } else { None };
        let report = system
            .run_round(hook)
            .map_err(|e| Error::Round { round, source: Box::new(e) })?;
        log::info!("round {round}: accuracy {:.4}", report.accuracy);
        rows.push(MetricsRow::from_report(config, &report));
    }
    let last = rows.last().expect("at least one round");
    let summary = Summary {
        schema: METRICS_SCHEMA,
        seed: config.seed,
        rounds: rows.len(),
        final_accuracy: last.accuracy,
        best_accuracy: rows.iter().map(|r| r.accuracy).fold(0.0, f64::max),
        mean_precision: mean(rows.iter().filter_map(|r| r.precision)),
        mean_recall: mean(rows.iter().filter_map(|r| r.recall)),
        momentum_updates: defense.momentum_log.len(),
        momentum_in_unit_interval: defense
            .momentum_log
            .iter()
            .all(|&(_, mu, eta)| mu > 0.0 && mu < 1.0 && eta > 0.0 && eta < 1.0),
        wall_ms: start.elapsed().as_millis(),
        config: config.clone(),
    };
    Ok(ExperimentResult {
        csv: metrics_csv(config, &rows),
        rows,
        summary,
        momentum_log: defense.momentum_log,
        score_dump: defense.score_dump,
    })
}

/// Writes `<name>.csv`, `<name>.json` and, if present, `<name>.scores.csv`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv = dir.join(format!("{name}.csv"));
    std::fs::write(&csv, &result.csv)?;
    written.push(csv);
    let json = dir.join(format!("{name}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&result.summary)?)?;
    written.push(json);
    if let Some(dump) = &result.score_dump {
        let path = dir.join(format!("{name}.scores.csv"));
        std::fs::write(&path, dump)?;
        written.push(path);
    }
    Ok(written)
}
