//! Experiment configuration: a flat TOML document with typed values.
//!
//! Every key is optional; absent keys take the defaults below. Unknown keys
//! are rejected so that a typo never silently falls back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AdaptiveMode, AttackMask, AttackSpec, WeightMode};
use crate::detect::{DetectConfig, PprParams, Teleport};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::influence::{AdTeacherConfig, ScoreLift};
use crate::recover::{GanConfig, GateConfig};
use crate::sfl::{AggregatorKind, PoolScope};

/// Which parts of the defense run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    Off,
    Full,
    /// No influence teacher: single-teacher distillation, no label check.
    NoAdTeacher,
    /// Student trained on its own labels only.
    NoDistillation,
}

impl DefenseMode {
    pub fn enabled(self) -> bool {
        self != DefenseMode::Off
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub malicious_ratio: f64,
    /// Percentage of clients taking part in each round.
    pub participation: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global-norm gradient clipping for client and server steps.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub aggregator: String,
    /// Krum / trimmed-mean parameter as a percentage of the group.
    pub robust_param: f64,
    pub server_replicas: bool,
    pub pool_scope: PoolScope,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub separation: f64,
    pub idx_train_images: Option<String>,
    pub idx_train_labels: Option<String>,
    pub idx_test_images: Option<String>,
    pub idx_test_labels: Option<String>,
    pub downsample: Option<usize>,
    pub non_iid_q: f64,
    pub client_hidden: Vec<usize>,
    pub server_hidden: Vec<usize>,
    pub bottleneck: usize,

    pub attack: String,
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

    pub defense: DefenseMode,
    pub warmup_rounds: usize,
    pub refresh_every: usize,
    pub knn_k: usize,
    pub ppr_alpha: f64,
    pub ppr_eps: f64,
    pub ppr_tol: f64,
    pub ppr_max_iter: usize,
    pub teleport: Teleport,
    pub rho: f64,
    pub kde_bandwidth: Option<f64>,
    pub per_class_detection: bool,

    pub gan_noise_dim: usize,
    pub gan_hidden: usize,
    pub gan_lr: f64,
    pub gan_steps: usize,
    pub gan_min_samples: usize,
    pub gan_batch: usize,
    pub gan_ema: f64,
    pub gan_every: usize,
    pub gate: bool,
    pub tau_conf: f64,
    pub budget: usize,

    pub beta: f64,
    pub ad_lambda_b: f64,
    pub ad_lambda_c: f64,
    pub score_lift: ScoreLift,
    pub ad_hidden: Vec<usize>,
    pub ad_epochs: usize,
    pub ad_lr: f64,
    pub ad_refresh: usize,
    pub ad_max_nodes: usize,

    pub tau: f64,
    pub momentum_m: f64,
    pub kappa: f64,
    pub distill_eps: f64,
    pub mu0: f64,
    pub eta0: f64,
    pub lambda_b: f64,
    pub student_hidden: usize,
    pub student_epochs: usize,
    pub student_lr: f64,
    pub reservoir_ratio: f64,
    pub aux_batch: usize,

    pub track_sgv: bool,
    pub dump_scores: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let attack = AttackSpec::default();
        let detect = DetectConfig::default();
        let gan = GanConfig::default();
        let gate = GateConfig::default();
        let ad = AdTeacherConfig::default();
        let distill = DistillConfig::default();
        Self {
            seed: 0,
            rounds: 100,
            clients: 10,
            malicious_ratio: 0.2,
            participation: 100.0,
            lr: 1e-4,
            momentum: 0.0,
            grad_clip: None,
            batch_size: 64,
            local_epochs: 1,
            aggregator: "fedavg".into(),
            robust_param: 10.0,
            server_replicas: false,
            pool_scope: PoolScope::Round,

            dataset: DatasetKind::Synthetic,
            classes: 10,
            dim: 20,
            per_class: 100,
            test_per_class: 40,
            spread: 1.0,
            separation: 3.0,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            downsample: None,
            non_iid_q: 0.0,
            client_hidden: vec![32],
            server_hidden: vec![32],
            bottleneck: 3,

            attack: attack.mask.to_string(),
            label_shift: attack.label_shift,
            input_scale: attack.input_scale,
            smashed_scale: attack.smashed_scale,
            weight_scale: attack.weight_scale,
            weight_mode: attack.weight_mode,
            adaptive: attack.adaptive,
            adaptive_strength: attack.adaptive_strength,
            adaptive_k: attack.adaptive_k,
            adaptive_mode: attack.adaptive_mode,
            attack_epochs: attack.attack_epochs,
            attack_lr: attack.attack_lr,

            defense: DefenseMode::Off,
            warmup_rounds: 2,
            refresh_every: 5,
            knn_k: detect.k,
            ppr_alpha: detect.ppr.alpha,
            ppr_eps: detect.ppr.eps,
            ppr_tol: detect.ppr.tol,
            ppr_max_iter: detect.ppr.max_iter,
            teleport: detect.ppr.teleport,
            rho: detect.rho,
            kde_bandwidth: detect.bandwidth,
            per_class_detection: detect.per_class,

            gan_noise_dim: gan.noise_dim,
            gan_hidden: gan.hidden,
            gan_lr: gan.lr,
            gan_steps: gan.steps,
            gan_min_samples: gan.min_samples,
            gan_batch: gan.batch,
            gan_ema: gan.ema,
            gan_every: 1,
            gate: true,
            tau_conf: gate.tau_conf,
            budget: gate.budget,

            beta: ad.beta,
            ad_lambda_b: ad.lambda_b,
            ad_lambda_c: ad.lambda_c,
            score_lift: ad.lift,
            ad_hidden: ad.hidden,
            ad_epochs: ad.epochs,
            ad_lr: ad.lr,
            ad_refresh: ad.refresh,
            ad_max_nodes: ad.max_nodes,

            tau: distill.tau,
            momentum_m: distill.momentum,
            kappa: distill.kappa,
            distill_eps: distill.eps,
            mu0: distill.mu0,
            eta0: distill.eta0,
            lambda_b: distill.lambda_b,
            student_hidden: distill.hidden,
            student_epochs: distill.epochs,
            student_lr: distill.lr,
            reservoir_ratio: distill.reservoir_ratio,
            aux_batch: distill.batch,

            track_sgv: true,
            dump_scores: false,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be at least 1"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key = value` overrides. Values are read
    /// as TOML literals, falling back to a bare string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Format {
                offset: e.span().map_or(0, |s| s.start as u64),
                message: e.message().to_string(),
            })?;
        for (key, raw) in overrides {
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            table.insert(key.clone(), value);
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn attack_mask(&self) -> Result<AttackMask> {
        self.attack.parse()
    }

    pub fn aggregator_kind(&self) -> Result<AggregatorKind> {
        self.aggregator.parse()
    }

    pub fn malicious_count(&self) -> usize {
        (self.malicious_ratio * self.clients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        nonzero("clients", self.clients)?;
        nonzero("rounds", self.rounds)?;
        nonzero("batch_size", self.batch_size)?;
        nonzero("local_epochs", self.local_epochs)?;
        nonzero("bottleneck", self.bottleneck)?;
        nonzero("refresh_every", self.refresh_every)?;
        nonzero("gan_every", self.gan_every)?;
        nonzero("aux_batch", self.aux_batch)?;
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            return Err(Error::config(
                "malicious_ratio",
                format!("must lie in [0,1], got {}", self.malicious_ratio),
            ));
        }
        if !(self.participation > 0.0 && self.participation <= 100.0) {
            return Err(Error::config("participation", "must lie in (0,100]"));
        }
        positive("lr", self.lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0,1)"));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        self.aggregator_kind()?;
        if !(0.0..50.0).contains(&self.robust_param) {
            return Err(Error::config("robust_param", "must lie in [0,50)"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least two classes"));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                nonzero("dim", self.dim)?;
                nonzero("per_class", self.per_class)?;
                nonzero("test_per_class", self.test_per_class)?;
                if !(self.spread >= 0.0) {
                    return Err(Error::config("spread", "must be non-negative"));
                }
            }
            DatasetKind::Idx => {
                for (name, v) in [
                    ("idx_train_images", &self.idx_train_images),
                    ("idx_train_labels", &self.idx_train_labels),
                    ("idx_test_images", &self.idx_test_images),
                    ("idx_test_labels", &self.idx_test_labels),
                ] {
                    if v.is_none() {
                        return Err(Error::config(name, "required when dataset = \"idx\""));
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.non_iid_q) {
            return Err(Error::config("non_iid_q", "must lie in [0,1]"));
        }
        self.attack_spec()?.validate()?;
        if self.defense.enabled() {
            self.detect_config().ppr.validate()?;
            if self.knn_k == 0 {
                return Err(Error::config("knn_k", "must be at least 1"));
            }
            if !(self.rho > 0.0 && self.rho < 100.0) {
                return Err(Error::config("rho", "must lie in (0,100)"));
            }
            self.gan_config().validate()?;
            if !(0.0..=1.0).contains(&self.tau_conf) {
                return Err(Error::config("tau_conf", "must lie in [0,1]"));
            }
            if !(self.beta > 0.0 && self.beta < 1.0) {
                return Err(Error::config("beta", "must lie in (0,1)"));
            }
            positive("ad_lr", self.ad_lr)?;
            nonzero("ad_refresh", self.ad_refresh)?;
            nonzero("ad_max_nodes", self.ad_max_nodes)?;
            self.distill_config().validate()?;
        }
        Ok(())
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        Ok(AttackSpec {
            mask: self.attack_mask()?,
            label_shift: self.label_shift,
            input_scale: self.input_scale,
            smashed_scale: self.smashed_scale,
            weight_scale: self.weight_scale,
            weight_mode: self.weight_mode,
            adaptive: self.adaptive,
            adaptive_strength: self.adaptive_strength,
            adaptive_k: self.adaptive_k,
            adaptive_mode: self.adaptive_mode,
            attack_epochs: self.attack_epochs,
            attack_lr: self.attack_lr,
        })
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            k: self.knn_k,
            rho: self.rho,
            bandwidth: self.kde_bandwidth,
            ppr: PprParams {
                alpha: self.ppr_alpha,
                eps: self.ppr_eps,
                tol: self.ppr_tol,
                max_iter: self.ppr_max_iter,
                teleport: self.teleport,
            },
            per_class: self.per_class_detection,
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            noise_dim: self.gan_noise_dim,
            hidden: self.gan_hidden,
            lr: self.gan_lr,
            steps: self.gan_steps,
            min_samples: self.gan_min_samples,
            batch: self.gan_batch,
            ema: self.gan_ema,
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            tau_conf: self.tau_conf,
            budget: self.budget,
        }
    }

    pub fn ad_config(&self) -> AdTeacherConfig {
        AdTeacherConfig {
            hidden: self.ad_hidden.clone(),
            epochs: self.ad_epochs,
            lr: self.ad_lr,
            batch: self.aux_batch,
            beta: self.beta,
            lambda_b: self.ad_lambda_b,
            lambda_c: self.ad_lambda_c,
            lift: self.score_lift,
            refresh: self.ad_refresh,
            max_nodes: self.ad_max_nodes,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            tau: self.tau,
            momentum: self.momentum_m,
            kappa: self.kappa,
            eps: self.distill_eps,
            mu0: self.mu0,
            eta0: self.eta0,
            lambda_b: self.lambda_b,
            hidden: self.student_hidden,
            epochs: self.student_epochs,
            lr: self.student_lr,
            batch: self.aux_batch,
            reservoir_ratio: self.reservoir_ratio,
        }
    }
}

fn config_error(e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    // serde names the offending key in backticks, e.g. "unknown field `x`".
    let field = message
        .split('`')
        .nth(1)
        .unwrap_or("config")
        .to_string();
    Error::Config { field, message }
}
