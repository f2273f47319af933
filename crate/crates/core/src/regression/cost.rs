use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-12;

/// Mean binary cross-entropy over a batch.
pub fn bce_cost(targets: &[f64], predictions: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty("binary cross-entropy of an empty batch"));
    }
    if targets.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            context: "bce predictions",
            expected: targets.len(),
            actual: predictions.len(),
        });
    }
    let sum: f64 = targets
        .iter()
        .zip(predictions)
        .map(|(&t, &q)| {
            let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            t * q.ln() + (1.0 - t) * (1.0 - q).ln()
        })
        .sum();
    Ok(-sum / targets.len() as f64)
}

/// Mean over videos of the mean squared error over symptoms.
pub fn mse_cost(predictions: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
    if predictions.dim() != targets.dim() {
        return Err(Error::DimensionMismatch {
            context: "mse targets",
            expected: predictions.len(),
            actual: targets.len(),
        });
    }
    let (v, w) = predictions.dim();
    if v == 0 || w == 0 {
        return Err(Error::Empty("mean squared error of an empty batch"));
    }
    let mut total = 0.0;
    for (p_row, t_row) in predictions.rows().into_iter().zip(targets.rows()) {
        let row: f64 = p_row
            .iter()
            .zip(t_row)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        total += row / w as f64;
    }
    Ok(total / v as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_spot_values() {
        assert!(bce_cost(&[1.0], &[1.0 - BCE_EPS]).unwrap() < 1e-11);
        assert_abs_diff_eq!(bce_cost(&[1.0], &[0.5]).unwrap(), LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bce_cost(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            LN_2,
            epsilon = 1e-12
        );
        // clamping keeps a confident miss finite
        assert!(bce_cost(&[1.0], &[0.0]).unwrap().is_finite());
        assert!(bce_cost(&[], &[]).is_err());
    }

    #[test]
    fn mse_spot_values() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_cost(p.view(), p.view()).unwrap(), 0.0);
        assert_eq!(mse_cost(array![[2.0]].view(), array![[4.0]].view()).unwrap(), 4.0);
        assert_eq!(
            mse_cost(array![[1.0], [3.0]].view(), array![[2.0], [1.0]].view()).unwrap(),
            2.5
        );
        assert!(mse_cost(array![[1.0, 2.0]].view(), array![[1.0]].view()).is_err());
    }
}
