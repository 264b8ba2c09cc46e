//! The hyperparameter search grid as an enumerable configuration set.

use serde::{Deserialize, Serialize};

use super::protocols::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::{InterEncoder, ModelSpec};

pub const BATCH_SIZES: [usize; 4] = [16, 32, 64, 128];
pub const LEARNING_RATES: [f64; 3] = [5e-4, 1e-3, 5e-3];
pub const DROPOUTS: [f64; 3] = [0.0, 0.05, 0.1];
pub const EMBED_DIMS: [usize; 4] = [32, 64, 128, 256];
pub const MAX_LAYERS: usize = 12;

/// Reject a learning rate or batch size outside the grid.
pub fn check_grid_values(lr: f64, batch_size: usize) -> Result<()> {
    if !LEARNING_RATES.contains(&lr) {
        return Err(Error::Config(format!("learning rate {lr} is not in the grid {LEARNING_RATES:?}")));
    }
    if !BATCH_SIZES.contains(&batch_size) {
        return Err(Error::Config(format!("batch size {batch_size} is not in the grid {BATCH_SIZES:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub embed_dims: Vec<usize>,
    pub intra_layers: Vec<usize>,
    pub inter_layers: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            batch_sizes: BATCH_SIZES.to_vec(),
            learning_rates: LEARNING_RATES.to_vec(),
            dropouts: DROPOUTS.to_vec(),
            embed_dims: EMBED_DIMS.to_vec(),
            intra_layers: (0..=MAX_LAYERS).collect(),
            inter_layers: (0..=MAX_LAYERS).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub embed_dim: usize,
    pub intra_layers: usize,
    pub inter_layers: usize,
}

impl HyperGrid {
    /// Every axis must be a nonempty subset of the full grid.
    pub fn validate(&self) -> Result<()> {
        fn subset<T: PartialEq + std::fmt::Debug>(name: &str, got: &[T], allowed: &[T]) -> Result<()> {
            if got.is_empty() {
                return Err(Error::Config(format!("grid axis {name} is empty")));
            }
            if let Some(bad) = got.iter().find(|v| !allowed.contains(v)) {
                return Err(Error::Config(format!("grid axis {name}: {bad:?} is not an allowed value")));
            }
            Ok(())
        }
        let layers: Vec<usize> = (0..=MAX_LAYERS).collect();
        subset("batch_sizes", &self.batch_sizes, &BATCH_SIZES)?;
        subset("learning_rates", &self.learning_rates, &LEARNING_RATES)?;
        subset("dropouts", &self.dropouts, &DROPOUTS)?;
        subset("embed_dims", &self.embed_dims, &EMBED_DIMS)?;
        subset("intra_layers", &self.intra_layers, &layers)?;
        subset("inter_layers", &self.inter_layers, &layers)
    }

    pub fn len(&self) -> usize {
        self.batch_sizes.len()
            * self.learning_rates.len()
            * self.dropouts.len()
            * self.embed_dims.len()
            * self.intra_layers.len()
            * self.inter_layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product in axis order (batch size outermost).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::with_capacity(self.len());
        for &batch_size in &self.batch_sizes {
            for &lr in &self.learning_rates {
                for &dropout in &self.dropouts {
                    for &embed_dim in &self.embed_dims {
                        for &intra_layers in &self.intra_layers {
                            for &inter_layers in &self.inter_layers {
                                out.push(GridPoint {
                                    batch_size,
                                    lr,
                                    dropout,
                                    embed_dim,
                                    intra_layers,
                                    inter_layers,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl GridPoint {
    /// A copy of `base` with this point's hyperparameters. For the cycle-token model the
    /// embedding dimension sets `d1` and the inter stack width; layer counts apply per encoder.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.train.batch_size = self.batch_size;
        cfg.train.adam.lr = self.lr;
        match &mut cfg.model {
            ModelSpec::Cpmlp(c) => {
                c.d1 = self.embed_dim;
                c.dropout = self.dropout;
                c.intra_layers = self.intra_layers;
                if let InterEncoder::MlpStack { layers, hidden } = &mut c.inter {
                    *layers = self.inter_layers;
                    *hidden = self.embed_dim;
                }
            }
            ModelSpec::Mlp(c) => {
                c.d = self.embed_dim;
                c.dropout = self.dropout;
                c.layers = self.inter_layers;
            }
            ModelSpec::Dummy => {}
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CyclePatchConfig;

    #[test]
    fn full_grid_size_and_validation() {
        let g = HyperGrid::default();
        g.validate().unwrap();
        assert_eq!(g.len(), 4 * 3 * 3 * 4 * 13 * 13);
        assert_eq!(g.points().len(), g.len());
        let bad = HyperGrid {
            learning_rates: vec![1e-2],
            ..HyperGrid::default()
        };
        assert!(bad.validate().is_err());
        assert!(check_grid_values(1e-3, 32).is_ok());
        assert!(check_grid_values(2e-3, 32).is_err());
        assert!(check_grid_values(1e-3, 20).is_err());
    }

    #[test]
    fn apply_sets_fields() {
        let base = ExperimentConfig {
            model: ModelSpec::Cpmlp(CyclePatchConfig::default()),
            train: Default::default(),
            seeds: vec![0],
            alpha: 0.15,
            split: Default::default(),
            sweep: None,
        };
        let p = GridPoint {
            batch_size: 64,
            lr: 5e-3,
            dropout: 0.1,
            embed_dim: 32,
            intra_layers: 3,
            inter_layers: 4,
        };
        let cfg = p.apply(&base);
        assert_eq!(cfg.train.batch_size, 64);
        let ModelSpec::Cpmlp(c) = cfg.model else { panic!() };
        assert_eq!((c.d1, c.intra_layers, c.dropout), (32, 3, 0.1));
        assert_eq!(c.inter, InterEncoder::MlpStack { layers: 4, hidden: 32 });
    }
}
