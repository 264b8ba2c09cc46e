use crate::error::{Error, Result};

/// Constant predictor: the mean of the training labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DummyModel {
    pub mean: f64,
}

impl DummyModel {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InsufficientData("dummy model needs at least one training label".into()));
        }
        Ok(DummyModel {
            mean: labels.iter().sum::<f64>() / labels.len() as f64,
        })
    }

    pub fn predict<Q>(&self, _query: &Q) -> f64 {
        self.mean
    }
}
