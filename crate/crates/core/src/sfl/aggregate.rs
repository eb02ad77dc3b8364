//! Parameter aggregation across participants.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::MlpModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    FedAvg,
    Median,
    /// Drops the `trim` largest and `trim` smallest values per coordinate.
    TrimmedMean { trim: usize },
    /// Selects the input with the smallest squared distance to its
    /// `n - f - 2` nearest peers.
    Krum { f: usize },
}

/// Aggregator family as named in configs, before the robustness parameter
/// is resolved against the group size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorKind {
    FedAvg,
    Median,
    TrimmedMean,
    Krum,
}

impl AggregatorKind {
    /// Converts a percentage of the group into the trim / Byzantine count.
    pub fn resolve(self, group: usize, percent: f64) -> Aggregator {
        let count = (group as f64 * percent / 100.0).round() as usize;
        match self {
            AggregatorKind::FedAvg => Aggregator::FedAvg,
            AggregatorKind::Median => Aggregator::Median,
            AggregatorKind::TrimmedMean => Aggregator::TrimmedMean { trim: count },
            AggregatorKind::Krum => Aggregator::Krum { f: count },
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorKind::FedAvg => "fedavg",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Krum => "krum",
        })
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(AggregatorKind::FedAvg),
            "median" => Ok(AggregatorKind::Median),
            "trimmed_mean" => Ok(AggregatorKind::TrimmedMean),
            "krum" => Ok(AggregatorKind::Krum),
            other => Err(Error::config("aggregator", format!("unknown aggregator `{other}`"))),
        }
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Combines same-layout models into one.
pub fn aggregate(models: &[MlpModel], weights: &[f64], method: Aggregator) -> Result<MlpModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Domain("aggregation over zero models".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if let Some(bad) = models.iter().position(|m| !m.same_layout(first)) {
        return Err(Error::Shape(format!("model {bad} has a different layout")));
    }
    let n = models.len();
    let flats: Vec<Vec<f64>> = models.iter().map(MlpModel::flat_params).collect();
    let dim = flats[0].len();
    let combined: Vec<f64> = match method {
        Aggregator::FedAvg => {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
                return Err(Error::config("weights", "must be non-negative with a positive sum"));
            }
            let mut out = vec![0.0; dim];
            for (flat, w) in flats.iter().zip(weights) {
                for (o, v) in out.iter_mut().zip(flat) {
                    *o += w / total * v;
                }
            }
            out
        }
        Aggregator::Median => (0..dim)
            .map(|j| {
                let mut col: Vec<f64> = flats.iter().map(|f| f[j]).collect();
                median_of(&mut col)
            })
            .collect(),
        Aggregator::TrimmedMean { trim } => {
            if 2 * trim >= n {
                return Err(Error::config(
                    "robust_param",
                    format!("cannot trim {trim} from each side of {n} models"),
                ));
            }
            (0..dim)
                .map(|j| {
                    let mut col: Vec<f64> = flats.iter().map(|f| f[j]).collect();
                    col.sort_by(f64::total_cmp);
                    let kept = &col[trim..n - trim];
                    kept.iter().sum::<f64>() / kept.len() as f64
                })
                .collect()
        }
        Aggregator::Krum { f } => {
            if n < f + 3 {
                return Err(Error::config(
                    "robust_param",
                    format!("krum with f = {f} needs at least {} models, got {n}", f + 3),
                ));
            }
            let neighbours = n - f - 2;
            let scores: Vec<f64> = (0..n)
                .map(|i| {
                    let mut d: Vec<f64> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| sq_dist(&flats[i], &flats[j]))
                        .collect();
                    d.sort_by(f64::total_cmp);
                    d[..neighbours].iter().sum()
                })
                .collect();
            let best = (0..n)
                .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .expect("n >= 3");
            flats[best].clone()
        }
    };
    let mut out = first.clone();
    out.set_flat_params(&combined)?;
    Ok(out)
}
