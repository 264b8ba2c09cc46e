//! Per-feature standardization of cycle tokens, fitted on training data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{SampleTensor, TOKEN_LEN};
use crate::scalar::Scalar;

/// Features whose training spread falls below this are only centered.
const MIN_STD: f64 = 1e-8;

/// Mean and standard deviation of each of the 900 token features (channel, point),
/// pooled over every real cycle of the fitting samples. Padding slots are never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn fit(samples: &[&SampleTensor]) -> Result<Self> {
        let n: usize = samples.iter().map(|s| s.usable_cycles).sum();
        if n == 0 {
            return Err(Error::InsufficientData("no cycles to fit the input scaler".into()));
        }
        let mut token = vec![0.0f64; TOKEN_LEN];
        let mut mean = vec![0.0f64; TOKEN_LEN];
        for s in samples {
            for c in 0..s.usable_cycles {
                s.write_token(c, &mut token);
                mean.iter_mut().zip(&token).for_each(|(m, x)| *m += x);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; TOKEN_LEN];
        for s in samples {
            for c in 0..s.usable_cycles {
                s.write_token(c, &mut token);
                for ((v, x), m) in var.iter_mut().zip(&token).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > MIN_STD {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputScaler { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != TOKEN_LEN || self.std.len() != TOKEN_LEN {
            return Err(Error::Config(format!(
                "input scaler needs {TOKEN_LEN} means and stds, got {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if !self.mean.iter().all(|m| m.is_finite()) || !self.std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config("input scaler has non-finite or nonpositive entries".into()));
        }
        Ok(())
    }

    /// Standardize value `x` of token feature `k`.
    #[inline]
    pub fn apply<T: Scalar>(&self, k: usize, x: T) -> T {
        (x - T::of(self.mean[k])) / T::of(self.std[k])
    }

    /// Standardize a whole token in place.
    pub fn apply_token<T: Scalar>(&self, token: &mut [T]) {
        for (k, x) in token.iter_mut().enumerate() {
            *x = self.apply(k, *x);
        }
    }
}
