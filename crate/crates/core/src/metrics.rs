//! Regression metrics on three-component targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: [f64; 3],
    pub mean_r2: f64,
    /// RMSE over the population standard deviation of the target.
    pub nrmse: [f64; 3],
    /// Mean over samples of the squared Euclidean error.
    pub mse: f64,
}

/// Coefficient of determination and NRMSE of a scalar series.
pub fn r2_nrmse(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != target.len() || target.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metric inputs have lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = target.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance { component: 0 });
    }
    Ok((1.0 - ss_res / ss_tot, (ss_res / n).sqrt() / (ss_tot / n).sqrt()))
}

pub fn compute_metrics(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<Metrics> {
    let mut r2 = [0.0; 3];
    let mut nrmse = [0.0; 3];
    for c in 0..3 {
        let p: Vec<f64> = pred.iter().map(|v| v[c]).collect();
        let t: Vec<f64> = target.iter().map(|v| v[c]).collect();
        let (a, b) = r2_nrmse(&p, &t).map_err(|e| match e {
            Error::ZeroVariance { .. } => Error::ZeroVariance { component: c },
            other => other,
        })?;
        r2[c] = a;
        nrmse[c] = b;
    }
    let mse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / target.len() as f64;
    Ok(Metrics { r2, mean_r2: r2.iter().sum::<f64>() / 3.0, nrmse, mse })
}
