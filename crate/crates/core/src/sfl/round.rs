//! Round orchestration: attacks, client forwards, the optional defense hook,
//! server training, client backprop and dual aggregation.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, Aggregator, AggregatorKind};
use super::client::{client_backward, client_forward, ClientState, ClientTrace};
use super::record::SmashedRecord;
use super::server::{server_train_step, ServerState};
use crate::attacks::{apply_multi, AttackContext, Artifacts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, MlpModel, Sgd};
use crate::rng::{stream_rng, Stream};
use crate::sgv::estimate_sgv;

/// How much data the defense hook sees at once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolScope {
    /// Every client forwards its whole local epoch; the hook sees the
    /// pooled epoch and the server then trains over it in mini-batches.
    Round,
    /// Every client forwards one mini-batch; the hook sees the pooled
    /// mini-batches of a single synchronized step.
    Step,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SflConfig {
    pub seed: u64,
    pub classes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub aggregator: AggregatorKind,
    /// Trim / Byzantine count as a percentage of the group.
    pub robust_percent: f64,
    /// One server replica per client, aggregated by the main server.
    pub server_replicas: bool,
    pub scope: PoolScope,
    /// Fraction of clients active per round, in (0, 1].
    pub participation: f64,
    pub track_sgv: bool,
}

/// What a pool looks like to the defense.
#[derive(Clone, Debug)]
pub struct HookContext {
    pub seed: u64,
    pub round: usize,
    pub pool: usize,
    pub num_clients: usize,
    pub classes: usize,
}

/// Defense output: the rewritten pool plus bookkeeping for the report.
#[derive(Clone, Debug, Default)]
pub struct DefenseOutput {
    pub records: Vec<SmashedRecord>,
    /// Sample ids the detector flagged, if detection ran.
    pub flagged: Option<Vec<usize>>,
    pub substitution: Option<SubstitutionCounts>,
    pub momentum: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SubstitutionCounts {
    pub replaced: usize,
    pub dropped: usize,
    pub kept: usize,
    pub mean_confidence: f64,
}

/// Rewrites the pooled smashed records before server training.
pub trait DefenseHook {
    fn process(&mut self, ctx: &HookContext, records: Vec<SmashedRecord>) -> Result<DefenseOutput>;
}

/// Passes records through unchanged.
pub struct IdentityHook;

impl DefenseHook for IdentityHook {
    fn process(&mut self, _ctx: &HookContext, records: Vec<SmashedRecord>) -> Result<DefenseOutput> {
        Ok(DefenseOutput {
            records,
            ..DefenseOutput::default()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DetectionStats {
    pub flagged: usize,
    pub poisoned: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionStats {
    pub fn from_counts(flagged: usize, poisoned: usize, true_positives: usize) -> Self {
        let precision = if flagged == 0 {
            if poisoned == 0 { 1.0 } else { 0.0 }
        } else {
            true_positives as f64 / flagged as f64
        };
        let recall = if poisoned == 0 {
            1.0
        } else {
            true_positives as f64 / poisoned as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            flagged,
            poisoned,
            true_positives,
            precision,
            recall,
            f1,
        }
    }

    fn merge(self, other: DetectionStats) -> Self {
        Self::from_counts(
            self.flagged + other.flagged,
            self.poisoned + other.poisoned,
            self.true_positives + other.true_positives,
        )
    }

    /// Scores flagged ids against the records' ground truth.
    pub fn score(records: &[SmashedRecord], flagged: &[usize]) -> Self {
        let truth: HashMap<usize, bool> = records.iter().map(|r| (r.sample_id, r.poison_truth)).collect();
        let tp = flagged.iter().filter(|s| truth.get(s).copied().unwrap_or(false)).count();
        let poisoned = records.iter().filter(|r| r.poison_truth).count();
        Self::from_counts(flagged.len(), poisoned, tp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub client_loss: Vec<f64>,
    pub train_loss: f64,
    pub accuracy: f64,
    pub client_accuracy: Vec<f64>,
    pub detection: Option<DetectionStats>,
    pub substitution: Option<SubstitutionCounts>,
    pub sgv: Option<f64>,
    pub momentum: Option<(f64, f64)>,
    pub wall_ms: u128,
}

/// Accuracy of `h ∘ g` per test set and pooled over all of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    pub global: f64,
}

pub fn predict(client: &MlpModel, server: &MlpModel, data: &Dataset) -> Result<Vec<usize>> {
    let z = client.predict(&data.features, None)?;
    let logits = server.predict(&z, None)?;
    Ok(argmax_rows(&logits))
}

pub fn evaluate(client_models: &[&MlpModel], server: &MlpModel, test_sets: &[&Dataset]) -> Result<Evaluation> {
    if client_models.len() != test_sets.len() {
        return Err(Error::Shape("one client model per test set".into()));
    }
    let mut correct_total = 0usize;
    let mut total = 0usize;
    let mut per_client = Vec::with_capacity(test_sets.len());
    for (model, data) in client_models.iter().zip(test_sets) {
        if data.is_empty() {
            return Err(Error::Domain("empty test set".into()));
        }
        let preds = predict(model, server, data)?;
        let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
        per_client.push(correct as f64 / data.len() as f64);
        correct_total += correct;
        total += data.len();
    }
    Ok(Evaluation {
        per_client,
        global: correct_total as f64 / total.max(1) as f64,
    })
}

/// Complete simulator state between rounds.
#[derive(Clone, Debug)]
pub struct System {
    pub config: SflConfig,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub round: usize,
}

struct PoolOutcome {
    losses: BTreeMap<usize, Vec<f64>>,
    detection: Option<DetectionStats>,
    substitution: Option<SubstitutionCounts>,
    momentum: Option<(f64, f64)>,
    trained: Vec<SmashedRecord>,
}

impl System {
    pub fn new(config: SflConfig, clients: Vec<ClientState>, server: ServerState) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("clients", "need at least one client"));
        }
        if clients.iter().enumerate().any(|(i, c)| c.id != i) {
            return Err(Error::Contract("client ids must equal their positions".into()));
        }
        if !(config.participation > 0.0 && config.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        Ok(Self {
            config,
            clients,
            server,
            round: 0,
        })
    }

    pub fn global_client_model(&self) -> &MlpModel {
        &self.clients[0].model
    }

    fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.config.lr,
            momentum: self.config.momentum,
            clip: self.config.grad_clip,
        }
    }

    fn aggregator(&self, group: usize) -> Aggregator {
        self.config.aggregator.resolve(group, self.config.robust_percent)
    }

    /// Forwards each client's rows, applying pre- and post-forward attacks.
    fn forward_pool(
        &self,
        rows: &[Vec<usize>],
    ) -> Result<(Vec<SmashedRecord>, Vec<Option<ClientTrace>>)> {
        let mut pooled = Vec::new();
        let mut traces = Vec::with_capacity(self.clients.len());
        for (client, rows) in self.clients.iter().zip(rows) {
            if rows.is_empty() {
                traces.push(None);
                continue;
            }
            let mut batch = client.batch(rows);
            let ctx = client.attack.as_ref().map(|_| AttackContext {
                seed: self.config.seed,
                client_id: client.id,
                round: self.round,
                classes: self.config.classes,
                input_std: client.train.feature_std(),
            });
            if let (Some(spec), Some(ctx)) = (&client.attack, &ctx) {
                apply_multi(spec, ctx, Artifacts { batch: Some(&mut batch), ..Default::default() })?;
            }
            let (mut records, trace) = client_forward(client, &batch)?;
            if let (Some(spec), Some(ctx)) = (&client.attack, &ctx) {
                apply_multi(spec, ctx, Artifacts { records: Some(&mut records), ..Default::default() })?;
            }
            pooled.extend(records);
            traces.push(Some(trace));
        }
        Ok((pooled, traces))
    }

    fn run_pool(
        &mut self,
        rows: &[Vec<usize>],
        pool_index: usize,
        defense: &mut Option<&mut dyn DefenseHook>,
        replicas: &mut Option<Vec<(ServerState, f64)>>,
    ) -> Result<PoolOutcome> {
        let (pooled, traces) = self.forward_pool(rows)?;
        let originals: HashMap<usize, SmashedRecord> =
            pooled.iter().map(|r| (r.sample_id, r.clone())).collect();
        let truth_view = pooled.clone();
        let output = match defense.as_deref_mut() {
            Some(hook) => hook.process(
                &HookContext {
                    seed: self.config.seed,
                    round: self.round,
                    pool: pool_index,
                    num_clients: self.clients.len(),
                    classes: self.config.classes,
                },
                pooled,
            )?,
            None => DefenseOutput {
                records: pooled,
                ..DefenseOutput::default()
            },
        };
        for r in &output.records {
            match originals.get(&r.sample_id) {
                Some(orig) if orig.client_id == r.client_id => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "defense returned unknown record {} of client {}",
                        r.sample_id, r.client_id
                    )))
                }
            }
        }
        let detection = output
            .flagged
            .as_ref()
            .map(|flagged| DetectionStats::score(&truth_view, flagged));

        let mut records = output.records;
        let chunk = match self.config.scope {
            PoolScope::Round => {
                let mut rng = stream_rng(self.config.seed, Stream::Shuffle, u64::MAX, (self.round * 1000 + pool_index) as u64);
                records.shuffle(&mut rng);
                (self.config.batch_size * self.clients.len()).max(1)
            }
            PoolScope::Step => records.len().max(1),
        };

        let sgd = self.sgd();
        let mut losses: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut grads: BTreeMap<usize, Vec<(usize, Array1<f64>)>> = BTreeMap::new();
        for part in records.chunks(chunk) {
            let steps: Vec<(Vec<&SmashedRecord>, _)> = match replicas {
                None => vec![(part.iter().collect(), None)],
                Some(_) => {
                    let mut by_client: BTreeMap<usize, Vec<&SmashedRecord>> = BTreeMap::new();
                    for r in part {
                        by_client.entry(r.client_id).or_default().push(r);
                    }
                    by_client.into_iter().map(|(c, v)| (v, Some(c))).collect()
                }
            };
            for (subset, replica) in steps {
                let owned: Vec<SmashedRecord> = subset.iter().map(|r| (*r).clone()).collect();
                let server = match (replica, replicas.as_mut()) {
                    (Some(c), Some(reps)) => {
                        reps[c].1 += owned.len() as f64;
                        &mut reps[c].0
                    }
                    _ => &mut self.server,
                };
                let step = server_train_step(server, &owned, &sgd)?;
                let scale = owned.len() as f64;
                for ((r, loss), (sample, g)) in owned
                    .iter()
                    .zip(&step.per_sample_loss)
                    .zip(step.smashed_gradients)
                {
                    losses.entry(r.client_id).or_default().push(*loss);
                    let orig = &originals[&sample];
                    if orig.features == r.features {
                        grads.entry(r.client_id).or_default().push((sample, g * scale));
                    }
                }
            }
        }

        for (client, trace) in self.clients.iter_mut().zip(&traces) {
            let Some(trace) = trace else { continue };
            let n = trace.sample_ids.len() as f64;
            let g: Vec<(usize, Array1<f64>)> = grads
                .remove(&client.id)
                .unwrap_or_default()
                .into_iter()
                .map(|(s, g)| (s, g / n))
                .collect();
            client_backward(client, trace, &g, &sgd)?;
        }

        Ok(PoolOutcome {
            losses,
            detection,
            substitution: output.substitution,
            momentum: output.momentum,
            trained: records,
        })
    }

    /// Executes one full round and evaluates the aggregated model on the
    /// clients' test partitions.
    /// Clients taking part in the current round.
    pub fn active_clients(&self) -> Vec<bool> {
        let n = self.clients.len();
        let take = ((self.config.participation * n as f64).round() as usize).clamp(1, n);
        if take == n {
            return vec![true; n];
        }
        let mut ids: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.config.seed, Stream::Scenario, 1, self.round as u64);
        ids.shuffle(&mut rng);
        let mut active = vec![false; n];
        for &i in &ids[..take] {
            active[i] = true;
        }
        active
    }

    pub fn run_round(&mut self, mut defense: Option<&mut dyn DefenseHook>) -> Result<RoundReport> {
        let start = Instant::now();
        let n_clients = self.clients.len();
        let active = self.active_clients();
        let mut replicas: Option<Vec<(ServerState, f64)>> = if self.config.server_replicas {
            Some((0..n_clients).map(|_| (self.server.clone(), 0.0)).collect())
        } else {
            None
        };

        let mut losses: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut detection: Option<DetectionStats> = None;
        let mut substitution: Option<SubstitutionCounts> = None;
        let mut momentum = None;
        let mut last_trained = Vec::new();
        let mut pool_index = 0;
        for epoch in 0..self.config.local_epochs {
            let orders: Vec<Vec<usize>> = self
                .clients
                .iter()
                .map(|c| {
                    if !active[c.id] {
                        return Vec::new();
                    }
                    let mut idx: Vec<usize> = (0..c.train.len()).collect();
                    let mut rng = stream_rng(
                        self.config.seed,
                        Stream::Shuffle,
                        c.id as u64,
                        (self.round * self.config.local_epochs + epoch) as u64,
                    );
                    idx.shuffle(&mut rng);
                    idx
                })
                .collect();
            let pools: Vec<Vec<Vec<usize>>> = match self.config.scope {
                PoolScope::Round => vec![orders],
                PoolScope::Step => {
                    let bs = self.config.batch_size.max(1);
                    let steps = orders.iter().map(|o| o.len().div_ceil(bs)).max().unwrap_or(0);
                    (0..steps)
                        .map(|s| {
                            orders
                                .iter()
                                .map(|o| o.iter().skip(s * bs).take(bs).copied().collect())
                                .collect()
                        })
                        .collect()
                }
            };
            for rows in pools {
                let out = self.run_pool(&rows, pool_index, &mut defense, &mut replicas)?;
                pool_index += 1;
                for (c, l) in out.losses {
                    losses.entry(c).or_default().extend(l);
                }
                if let Some(d) = out.detection {
                    detection = Some(detection.map_or(d, |acc| acc.merge(d)));
                }
                if let Some(s) = out.substitution {
                    substitution = Some(match substitution {
                        None => s,
                        Some(acc) => {
                            let moved = acc.replaced + s.replaced;
                            SubstitutionCounts {
                                replaced: moved,
                                dropped: acc.dropped + s.dropped,
                                kept: acc.kept + s.kept,
                                mean_confidence: if moved == 0 {
                                    0.0
                                } else {
                                    (acc.mean_confidence * acc.replaced as f64
                                        + s.mean_confidence * s.replaced as f64)
                                        / moved as f64
                                },
                            }
                        }
                    });
                }
                if out.momentum.is_some() {
                    momentum = out.momentum;
                }
                last_trained = out.trained;
            }
        }

        // Weight poisoning lands right before the fed server aggregates.
        let mut uploads: Vec<MlpModel> = Vec::with_capacity(n_clients);
        let mut weights: Vec<f64> = Vec::with_capacity(n_clients);
        for client in self.clients.iter().filter(|c| active[c.id]) {
            weights.push(client.train.len() as f64);
            let mut model = client.model.clone();
            if let Some(spec) = &client.attack {
                let ctx = AttackContext {
                    seed: self.config.seed,
                    client_id: client.id,
                    round: self.round,
                    classes: self.config.classes,
                    input_std: Vec::new(),
                };
                apply_multi(spec, &ctx, Artifacts { model: Some(&mut model), ..Default::default() })?;
            }
            uploads.push(model);
        }
        let global = aggregate(&uploads, &weights, self.aggregator(uploads.len()))?;
        for client in &mut self.clients {
            client.model = global.clone();
        }
        if let Some(reps) = replicas {
            let (models, w): (Vec<MlpModel>, Vec<f64>) = reps
                .into_iter()
                .filter(|(_, n)| *n > 0.0)
                .map(|(s, n)| (s.model, n))
                .unzip();
            if !models.is_empty() {
                let method = self.aggregator(models.len());
                self.server.model = aggregate(&models, &w, method)?;
            }
        }

        let sgv = if self.config.track_sgv && last_trained.len() >= 2 {
            Some(estimate_sgv(&self.server.model, &last_trained)?.sgv)
        } else {
            None
        };

        let models: Vec<&MlpModel> = self.clients.iter().map(|c| &c.model).collect();
        let tests: Vec<&Dataset> = self.clients.iter().map(|c| &c.test).collect();
        let eval = evaluate(&models, &self.server.model, &tests)?;

        let client_loss: Vec<f64> = (0..n_clients)
            .map(|c| {
                losses
                    .get(&c)
                    .filter(|l| !l.is_empty())
                    .map(|l| l.iter().sum::<f64>() / l.len() as f64)
                    .unwrap_or(0.0)
            })
            .collect();
        let all: Vec<f64> = losses.values().flatten().copied().collect();
        let train_loss = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };

        let report = RoundReport {
            round: self.round,
            client_loss,
            train_loss,
            accuracy: eval.global,
            client_accuracy: eval.per_client,
            detection,
            substitution,
            sgv,
            momentum,
            wall_ms: start.elapsed().as_millis(),
        };
        self.round += 1;
        Ok(report)
    }
}
