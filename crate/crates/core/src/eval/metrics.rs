//! Life-prediction metrics and seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape {
            op: "metric",
            left: (truth.len(), 1),
            right: (pred.len(), 1),
        });
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("metric over zero samples".into()));
    }
    if let Some(y) = truth.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::Domain(format!("true life must be positive, got {y}")));
    }
    Ok(())
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check(truth, pred)?;
    let mut sum = 0.0;
    for (&y, &p) in truth.iter().zip(pred) {
        sum += (y - p).abs() / y;
    }
    Ok(sum / truth.len() as f64)
}

/// Fraction of predictions with `|y − ŷ| ≤ α·y`.
pub fn alpha_accuracy(truth: &[f64], pred: &[f64], alpha: f64) -> Result<f64> {
    check(truth, pred)?;
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let hits = truth.iter().zip(pred).filter(|(&y, &p)| (y - p).abs() <= alpha * y).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over the runs.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        if values.iter().all(|&v| v == values[0]) {
            return MeanStd { mean: values[0], std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

/// MAPE and α-accuracy over one set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub mape: f64,
    pub acc: f64,
}

impl Metrics {
    pub fn compute(truth: &[f64], pred: &[f64], alpha: f64) -> Result<Self> {
        Ok(Metrics {
            n: truth.len(),
            mape: mape(truth, pred)?,
            acc: alpha_accuracy(truth, pred, alpha)?,
        })
    }
}
