//! Gradient variance across records at the server head, and the factor
//! that bounds how much of it attackers can contribute.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{per_sample_cross_entropy, MlpModel};
use crate::sfl::{feature_matrix, SmashedRecord};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SgvReport {
    pub sgv: f64,
    /// ‖∇f_i − ∇F‖ for every record, in input order.
    pub deviations: Vec<f64>,
    pub clean: usize,
    pub poisoned: usize,
}

/// Per-record server gradients of the cross-entropy loss.
pub fn per_record_gradients(server: &MlpModel, records: &[SmashedRecord]) -> Result<Vec<Vec<f64>>> {
    let z = feature_matrix(records);
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let trace = server.forward(&z, None)?;
    let (_, grad) = per_sample_cross_entropy(trace.output(), &labels)?;
    server.per_sample_gradients(&trace, &grad)
}

/// Mean squared deviation of per-record gradients from their mean.
pub fn sgv_of(gradients: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = gradients.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let dim = gradients[0].len();
    let mut mean = vec![0.0; dim];
    for g in gradients {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let deviations: Vec<f64> = gradients
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    let sgv = deviations.iter().map(|d| d * d).sum::<f64>() / n as f64;
    (sgv, deviations)
}

pub fn estimate_sgv(server: &MlpModel, records: &[SmashedRecord]) -> Result<SgvReport> {
    if records.len() < 2 {
        return Err(Error::Domain("gradient variance needs at least two records".into()));
    }
    let grads = per_record_gradients(server, records)?;
    let (sgv, deviations) = sgv_of(&grads);
    let poisoned = records.iter().filter(|r| r.poison_truth).count();
    Ok(SgvReport {
        sgv,
        deviations,
        clean: records.len() - poisoned,
        poisoned,
    })
}

/// α²M² / (M̂ + M)².
pub fn theorem_factor(alpha: f64, clean: f64, poisoned: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) || clean < 0.0 || poisoned < 0.0 || clean + poisoned <= 0.0 {
        return Err(Error::Domain(format!(
            "factor needs alpha in [0,1] and non-negative counts, got {alpha}, {clean}, {poisoned}"
        )));
    }
    Ok((alpha * clean / (clean + poisoned)).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub before: SgvReport,
    pub after: SgvReport,
    pub alpha: f64,
    pub factor: f64,
    /// SGV_after / SGV_before, or 1 when both vanish.
    pub ratio: f64,
    pub holds: bool,
}

pub fn check_theorem(
    before: &[SmashedRecord],
    after: &[SmashedRecord],
    alpha: f64,
    clean: f64,
    poisoned: f64,
    server: &MlpModel,
) -> Result<TheoremCheck> {
    let factor = theorem_factor(alpha, clean, poisoned)?;
    let before = estimate_sgv(server, before)?;
    let after = estimate_sgv(server, after)?;
    let ratio = if before.sgv > 0.0 {
        after.sgv / before.sgv
    } else if after.sgv == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    let holds = after.sgv <= before.sgv;
    Ok(TheoremCheck {
        before,
        after,
        alpha,
        factor,
        ratio,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn factor_arithmetic() {
        assert_abs_diff_eq!(theorem_factor(0.2, 80.0, 20.0).unwrap(), 0.0256, epsilon = 1e-12);
        assert_eq!(theorem_factor(0.0, 10.0, 0.0).unwrap(), 0.0);
        assert!(theorem_factor(1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn opposite_gradients() {
        let g = vec![3.0, 4.0];
        let (sgv, dev) = sgv_of(&[g.clone(), g.iter().map(|v| -v).collect()]);
        assert_abs_diff_eq!(sgv, 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dev[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicates_have_zero_variance() {
        let (sgv, _) = sgv_of(&vec![vec![1.0, -2.0]; 4]);
        assert_eq!(sgv, 0.0);
    }
}
