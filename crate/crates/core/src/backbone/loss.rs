use crate::error::{CometError, Result};
use crate::numerics::Matrix;

/// Softmax in `f64` with max subtraction.
pub fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy for one example: `(loss, softmax - one_hot)`.
pub fn loss_cross_entropy(logits: &[f32], label: usize) -> Result<(f64, Vec<f32>)> {
    if label >= logits.len() {
        return Err(CometError::domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let log_sum = logits
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    let loss = log_sum - logits[label] as f64;
    let mut grad: Vec<f32> = softmax_row(logits).into_iter().map(|p| p as f32).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean squared error and its gradient `2 (p - t) / n`.
pub fn loss_mse(prediction: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>)> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(CometError::shape(format!(
            "prediction length {} vs target length {}",
            prediction.len(),
            target.len()
        )));
    }
    let n = prediction.len() as f64;
    let loss = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (*p as f64 - *t as f64).powi(2))
        .sum::<f64>()
        / n;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (2.0 * (*p as f64 - *t as f64) / n) as f32)
        .collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch; the gradient is already divided by the batch size.
pub fn batch_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(CometError::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let scale = 1.0 / labels.len() as f32;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.as_slice().len());
    for (row, &label) in logits.iter_rows().zip(labels) {
        let (l, g) = loss_cross_entropy(row, label)?;
        total += l;
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    Ok((
        total / labels.len() as f64,
        Matrix::from_raw(logits.rows(), logits.cols(), grad),
    ))
}

/// Mean squared error over every element of the batch.
pub fn batch_mse(prediction: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if prediction.shape() != target.shape() {
        return Err(CometError::shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let (loss, grad) = loss_mse(prediction.as_slice(), target.as_slice())?;
    Ok((loss, Matrix::from_raw(prediction.rows(), prediction.cols(), grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn uniform_logits_give_log_c() {
        let (l, _) = loss_cross_entropy(&[0.3; 7], 2).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let (l, g) = loss_cross_entropy(&[0.0, 1e6, 0.0], 1).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn gradient_sums_to_zero() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..10).map(|_| rng.normal(0.0, 3.0) as f32).collect();
            let (_, g) = loss_cross_entropy(&logits, rng.below(10)).unwrap();
            assert!(g.iter().map(|&v| v as f64).sum::<f64>().abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(loss_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn mse_cases() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        let (l, g) = loss_mse(&[1.0], &[0.0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![2.0]);
        assert!(loss_mse(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mse_gradient_matches_differences() {
        let mut rng = RngStream::new(2, 0);
        let p: Vec<f32> = (0..6).map(|_| rng.standard_normal() as f32).collect();
        let t: Vec<f32> = (0..6).map(|_| rng.standard_normal() as f32).collect();
        let (_, g) = loss_mse(&p, &t).unwrap();
        // exact f64 loss for the difference quotient
        let loss64 = |p: &[f64]| -> f64 {
            p.iter().zip(&t).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>() / p.len() as f64
        };
        let base: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        for i in 0..6 {
            let h = 1e-5;
            let mut up = base.clone();
            up[i] += h;
            let mut dn = base.clone();
            dn[i] -= h;
            let fd = (loss64(&up) - loss64(&dn)) / (2.0 * h);
            assert!((fd - g[i] as f64).abs() < 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn batch_cross_entropy_averages() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (l, g) = batch_cross_entropy(&logits, &[0, 1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.as_slice(), &[-0.25, 0.25, 0.25, -0.25]);
    }
}
