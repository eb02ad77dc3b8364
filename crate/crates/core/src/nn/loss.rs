//! Losses with their gradients with respect to the logits.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Row-wise softmax of `logits / temperature`, max-shifted.
pub fn softmax(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn argmax_rows(values: &Array2<f64>) -> Vec<usize> {
    values
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let classes = logits.ncols();
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Per-sample cross-entropy and the per-sample gradient `softmax - onehot`
/// (not divided by the batch size).
pub fn per_sample_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_labels(logits, labels)?;
    let logp = log_softmax(logits, 1.0);
    let losses = Array1::from_iter(labels.iter().enumerate().map(|(i, &y)| -logp[[i, y]]));
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    Ok((losses, grad))
}

/// Mean softmax cross-entropy; the gradient is `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (losses, mut grad) = per_sample_cross_entropy(logits, labels)?;
    let b = labels.len() as f64;
    grad /= b;
    Ok((losses.sum() / b, grad))
}

/// Per-sample `tau^2 KL(softmax(t/tau) || softmax(s/tau))` and its gradient
/// with respect to the student logits (not divided by the batch size).
pub fn per_sample_kl(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    tau: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if teacher_logits.raw_dim() != student_logits.raw_dim() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let log_p = log_softmax(teacher_logits, tau);
    let log_q = log_softmax(student_logits, tau);
    let p = log_p.mapv(f64::exp);
    let q = log_q.mapv(f64::exp);
    let tau2 = tau * tau;
    let losses = ((&log_p - &log_q) * &p).sum_axis(Axis(1)).mapv(|v| tau2 * v.max(0.0));
    let grad = (q - p) * tau;
    Ok((losses, grad))
}

/// Batch-mean temperature-scaled distillation loss; gradient flows to the
/// student only.
pub fn kl_distill(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let (losses, mut grad) = per_sample_kl(teacher_logits, student_logits, tau)?;
    let b = losses.len().max(1) as f64;
    grad /= b;
    Ok((losses.sum() / b, grad))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy on single-logit outputs against a constant
/// target in {0, 1}: `-log sigmoid(l)` for 1, `-log(1 - sigmoid(l))` for 0.
pub fn binary_logit_loss(logits: &Array2<f64>, target_one: bool) -> (f64, Array2<f64>) {
    let b = logits.nrows().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits.mapv(|l| {
        let s = super::model::sigmoid(l);
        if target_one {
            loss += softplus(-l);
            (s - 1.0) / b
        } else {
            loss += softplus(l);
            s / b
        }
    });
    (loss / b, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_two_class_is_ln2() {
        let (loss, _) = cross_entropy(&array![[0.3, 0.3], [-1.0, -1.0]], &[0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_go_to_zero() {
        let (loss, _) = cross_entropy(&array![[60.0, 0.0]], &[0]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn empty_batch_and_bad_label() {
        assert!(matches!(
            cross_entropy(&Array2::zeros((0, 3)), &[]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cross_entropy(&Array2::zeros((1, 3)), &[3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_b() {
        let logits = array![[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let (_, g) = cross_entropy(&logits, &[1, 2]).unwrap();
        let p = softmax(&logits, 1.0);
        assert!(((p[[0, 1]] - 1.0) / 2.0 - g[[0, 1]]).abs() < 1e-15);
        assert!((p[[1, 0]] / 2.0 - g[[1, 0]]).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let l = array![[0.2, -3.0, 1.0]];
        for tau in [0.5, 1.0, 4.0] {
            let (loss, grad) = kl_distill(&l, &l, tau).unwrap();
            assert!(loss.abs() < 1e-14);
            assert!(grad.iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(kl_distill(&Array2::zeros((1, 2)), &Array2::zeros((1, 3)), 1.0).is_err());
        assert!(kl_distill(&Array2::zeros((1, 2)), &Array2::zeros((1, 2)), 0.0).is_err());
    }

    #[test]
    fn half_probability_binary_losses() {
        let zeros = Array2::zeros((5, 1));
        let (real, _) = binary_logit_loss(&zeros, true);
        let (fake, _) = binary_logit_loss(&zeros, false);
        assert!((real - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((real + fake - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
