//! Topological anomaly detection on smashed activations.
//!
//! Records become nodes of a mutual-KNN graph with Gaussian edge weights.
//! A personalized PageRank pass turns the topology into per-node scores,
//! a kernel density estimate of those scores locates the valley between
//! the suspect and the normal population, and nodes scoring below the
//! adaptive threshold are flagged.

use std::io::Write;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfl::{feature_matrix, SmashedRecord};

const SIGMA_FLOOR: f64 = 1e-12;
const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const KDE_GRID: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub sigma: f64,
    pub gamma: f64,
    /// Sorted `(neighbor, weight)` lists; symmetric.
    pub adjacency: Vec<Vec<(usize, f64)>>,
    pub degrees: Vec<f64>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.adjacency[a]
            .binary_search_by_key(&b, |&(j, _)| j)
            .map(|i| self.adjacency[a][i].1)
            .unwrap_or(0.0)
    }

    pub fn dense(&self) -> Array2<f64> {
        let n = self.len();
        let mut w = Array2::zeros((n, n));
        for (i, row) in self.adjacency.iter().enumerate() {
            for &(j, v) in row {
                w[[i, j]] = v;
            }
        }
        w
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median with the two middle values averaged.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn build_knn_graph(z: &Array2<f64>, k: usize) -> Result<KnnGraph> {
    let n = z.nrows();
    if k == 0 || n <= k {
        return Err(Error::config("k", format!("need 1 <= k < node count, got k={k} with {n} nodes")));
    }
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(z.row(i), z.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    // Nearest neighbours by (distance, index); self excluded.
    let mut near = vec![vec![false; n]; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dist[[i, a]].total_cmp(&dist[[i, b]]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            near[i][j] = true;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if near[i][j] && near[j][i] {
                pairs.push((i, j));
            }
        }
    }
    let lengths: Vec<f64> = pairs.iter().map(|&(i, j)| dist[[i, j]].sqrt()).collect();
    let sigma = median(&lengths).unwrap_or(0.0).max(SIGMA_FLOOR);
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mut adjacency = vec![Vec::new(); n];
    for &(i, j) in &pairs {
        let w = (-gamma * dist[[i, j]]).exp().max(f64::MIN_POSITIVE);
        adjacency[i].push((j, w));
        adjacency[j].push((i, w));
    }
    for row in &mut adjacency {
        row.sort_by_key(|&(j, _)| j);
    }
    let degrees = adjacency.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect();
    Ok(KnnGraph {
        k,
        sigma,
        gamma,
        adjacency,
        degrees,
    })
}

/// Personalization vector for the propagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teleport {
    /// Proportional to the starting scores `1 / (d + ε)`.
    InverseDegree,
    Uniform,
    /// Proportional to the weighted degree; uniform on an edgeless graph.
    #[default]
    Degree,
}

impl std::str::FromStr for Teleport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_degree" => Ok(Self::InverseDegree),
            "uniform" => Ok(Self::Uniform),
            "degree" => Ok(Self::Degree),
            other => Err(Error::config("teleport", format!("unknown teleport `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PprParams {
    pub alpha: f64,
    pub eps: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub teleport: Teleport,
}

impl Default for PprParams {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            eps: 1e-9,
            tol: 1e-10,
            max_iter: 1000,
            teleport: Teleport::default(),
        }
    }
}

impl PprParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("ppr_alpha", format!("must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("ppr_eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::config("ppr_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TasScores {
    pub scores: Vec<f64>,
    pub teleport: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn teleport_vector(graph: &KnnGraph, mode: Teleport, eps: f64) -> Vec<f64> {
    let n = graph.len();
    let raw: Vec<f64> = match mode {
        Teleport::InverseDegree => graph.degrees.iter().map(|d| 1.0 / (d + eps)).collect(),
        Teleport::Uniform => vec![1.0; n],
        Teleport::Degree => graph.degrees.clone(),
    };
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// One application of `α·Pᵀr + (1−α)v` with `P = D⁻¹W`.
pub fn propagate(graph: &KnnGraph, r: &[f64], v: &[f64], alpha: f64) -> Vec<f64> {
    (0..graph.len())
        .map(|k| {
            let inflow: f64 = graph.adjacency[k]
                .iter()
                .map(|&(w, weight)| weight * r[w] / graph.degrees[w])
                .sum();
            alpha * inflow + (1.0 - alpha) * v[k]
        })
        .collect()
}

pub fn compute_tas(graph: &KnnGraph, params: &PprParams) -> Result<TasScores> {
    params.validate()?;
    let v = teleport_vector(graph, params.teleport, params.eps);
    let mut r: Vec<f64> = graph.degrees.iter().map(|d| 1.0 / (d + params.eps)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        let next = propagate(graph, &r, &v, params.alpha);
        iterations += 1;
        let delta: f64 = next.iter().zip(&r).map(|(a, b)| (a - b).abs()).sum();
        r = next;
        if delta < params.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("score propagation stopped after {iterations} iterations without converging");
    }
    Ok(TasScores {
        scores: r,
        teleport: v,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

pub fn silverman_bandwidth(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (1.06 * var.sqrt() * n.powf(-0.2)).max(BANDWIDTH_FLOOR)
}

pub fn kde(scores: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve> {
    if scores.len() < 2 {
        return Err(Error::Domain("density estimate needs at least two scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h.max(BANDWIDTH_FLOOR),
        Some(h) => return Err(Error::config("bandwidth", format!("must be positive, got {h}"))),
        None => silverman_bandwidth(scores),
    };
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID - 1) as f64;
    let norm = 1.0 / (scores.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..KDE_GRID).map(|i| lo + step * i as f64).collect();
    let density = grid
        .iter()
        .map(|&x| norm * scores.iter().map(|s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdeCurve {
        grid,
        density,
        bandwidth: h,
    })
}

/// Linear-interpolated percentile, `rho` in percent.
pub fn percentile(values: &[f64], rho: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * rho / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Deepest interior minimum between the two tallest modes, if bimodal.
pub fn density_valley(curve: &KdeCurve) -> Option<f64> {
    let d = &curve.density;
    let n = d.len();
    let mut modes: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1])
        .collect();
    if modes.len() < 2 {
        return None;
    }
    modes.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let (a, b) = (modes[0].min(modes[1]), modes[0].max(modes[1]));
    (a + 1..b)
        .filter(|&i| d[i] < d[i - 1] && d[i] <= d[i + 1])
        .min_by(|&x, &y| d[x].total_cmp(&d[y]).then(x.cmp(&y)))
        .map(|i| curve.grid[i])
}

pub fn adaptive_threshold(scores: &[f64], curve: &KdeCurve, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 100.0) {
        return Err(Error::config("rho", format!("must lie in (0,100), got {rho}")));
    }
    if scores.is_empty() {
        return Err(Error::Domain("threshold of an empty score set".into()));
    }
    let quantile = percentile(scores, rho);
    Ok(density_valley(curve).map_or(quantile, |valley| valley.min(quantile)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub k: usize,
    pub rho: f64,
    pub bandwidth: Option<f64>,
    pub ppr: PprParams,
    /// Score each class label separately.
    pub per_class: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 25.0,
            bandwidth: None,
            ppr: PprParams::default(),
            per_class: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TasResult {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub teleport: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kde: KdeCurve,
    pub threshold: f64,
    pub poison_mask: Vec<bool>,
}

/// Scores, threshold and mask for one node set.
pub fn score_nodes(z: &Array2<f64>, config: &DetectConfig) -> Result<TasResult> {
    let graph = build_knn_graph(z, config.k)?;
    let tas = compute_tas(&graph, &config.ppr)?;
    let curve = kde(&tas.scores, config.bandwidth)?;
    let threshold = adaptive_threshold(&tas.scores, &curve, config.rho)?;
    let poison_mask = tas.scores.iter().map(|&r| r < threshold).collect();
    Ok(TasResult {
        scores: tas.scores,
        alpha: config.ppr.alpha,
        teleport: tas.teleport,
        iterations: tas.iterations,
        converged: tas.converged,
        kde: curve,
        threshold,
        poison_mask,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGroup {
    pub label: Option<usize>,
    /// Record indices scored together.
    pub members: Vec<usize>,
    pub result: TasResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub groups: Vec<DetectionGroup>,
    /// Per record, in input order.
    pub scores: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Detection {
    pub fn clean_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    pub fn poisoned_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

pub fn detect(records: &[SmashedRecord], config: &DetectConfig) -> Result<Detection> {
    if records.len() <= config.k {
        return Err(Error::config(
            "k",
            format!("detection needs more than k={} records, got {}", config.k, records.len()),
        ));
    }
    let z = feature_matrix(records);
    let groups: Vec<(Option<usize>, Vec<usize>)> = if config.per_class {
        let classes = records.iter().map(|r| r.label).max().map_or(0, |m| m + 1);
        (0..classes)
            .map(|c| (Some(c), (0..records.len()).filter(|&i| records[i].label == c).collect::<Vec<_>>()))
            .filter(|(_, m)| !m.is_empty())
            .collect()
    } else {
        vec![(None, (0..records.len()).collect())]
    };
    let n = records.len();
    let mut scores = vec![f64::NAN; n];
    let mut thresholds = vec![f64::NAN; n];
    let mut mask = vec![false; n];
    let mut out = Vec::with_capacity(groups.len());
    for (label, members) in groups {
        if members.len() < 3 {
            // Too small to form a graph; left unflagged.
            continue;
        }
        let mut cfg = config.clone();
        cfg.k = cfg.k.min(members.len() - 1);
        let sub = z.select(ndarray::Axis(0), &members);
        let result = score_nodes(&sub, &cfg)?;
        for (pos, &i) in members.iter().enumerate() {
            scores[i] = result.scores[pos];
            thresholds[i] = result.threshold;
            mask[i] = result.poison_mask[pos];
        }
        out.push(DetectionGroup { label, members, result });
    }
    Ok(Detection {
        groups: out,
        scores,
        thresholds,
        mask,
    })
}

/// Writes one CSV line per record for plotting score distributions.
pub fn write_score_dump<W: Write>(
    mut out: W,
    round: usize,
    records: &[SmashedRecord],
    detection: &Detection,
    header: bool,
) -> Result<()> {
    if header {
        writeln!(out, "round,sample_id,client_id,label,score,threshold,flagged,poison_truth")?;
    }
    for (i, r) in records.iter().enumerate() {
        writeln!(
            out,
            "{round},{},{},{},{:e},{:e},{},{}",
            r.sample_id,
            r.client_id,
            r.label,
            detection.scores[i],
            detection.thresholds[i],
            u8::from(detection.mask[i]),
            u8::from(r.poison_truth)
        )?;
    }
    Ok(())
}
