//! Mini-batch MSE training with Adam and best-validation checkpoint selection.

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use super::metrics::mape;
use super::mmd::mmd_squared_with_grad;
use crate::diffkernel::ops::mse_loss;
use crate::diffkernel::AdamConfig;
use crate::error::{Error, Result};
use crate::models::{DummyModel, InputScaler, ModelCheckpoint, ModelSpec, Network};
use crate::preprocess::SampleTensor;
use crate::seed::{derive_seed, rng_for};

fn default_patience() -> Option<usize> {
    Some(20)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a new best validation MAPE.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Standardize token features with statistics of the training split.
    pub standardize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: default_patience(),
            standardize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
    /// Total objective of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    /// True when no optimizer step was taken.
    pub untrained: bool,
}

/// Extra MMD penalty between source and target embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Adaptation<'a> {
    pub source: &'a [&'a SampleTensor],
    pub weight: f64,
}

fn labels(samples: &[&SampleTensor]) -> Vec<f64> {
    samples.iter().map(|s| s.label as f64).collect()
}

fn require_nonempty(samples: &[&SampleTensor], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("{what} split is empty")));
    }
    Ok(())
}

/// Train `spec` from a seeded initialization.
pub fn train_model(
    spec: &ModelSpec,
    train: &[&SampleTensor],
    val: &[&SampleTensor],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    require_nonempty(train, "training")?;
    require_nonempty(val, "validation")?;
    let train_labels = labels(train);
    let Some(net) = Network::from_spec(spec)? else {
        return Ok(TrainOutcome {
            checkpoint: ModelCheckpoint::dummy(DummyModel::fit(&train_labels)?),
            history: Vec::new(),
            batch_losses: Vec::new(),
            untrained: false,
        });
    };
    let input_scaler = if cfg.standardize_inputs { Some(InputScaler::fit(train)?) } else { None };
    let net = net.with_scaler(input_scaler.clone());
    let start = ModelCheckpoint {
        spec: spec.clone(),
        label_scale: train_labels.iter().sum::<f64>() / train_labels.len() as f64,
        best_epoch: None,
        input_scaler,
        params: net.init(derive_seed(seed, "init", 0)),
    };
    fit(&net, start, train, val, cfg, seed, None)
}

/// Continue training a checkpoint (fine-tuning), optionally with a domain-adaptation term.
pub fn continue_training(
    checkpoint: &ModelCheckpoint,
    train: &[&SampleTensor],
    val: &[&SampleTensor],
    cfg: &TrainConfig,
    seed: u64,
    adapt: Option<Adaptation<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_nonempty(train, "training")?;
    require_nonempty(val, "validation")?;
    let Some(net) = checkpoint.network()? else {
        return Err(Error::Config("the dummy model cannot be fine-tuned".into()));
    };
    net.check_params(&checkpoint.params)?;
    let mut start = checkpoint.clone();
    start.params.reset_optimizer();
    fit(&net, start, train, val, cfg, seed, adapt)
}

fn validation_mape(net: &Network, ckpt: &ModelCheckpoint, val: &[&SampleTensor]) -> Result<f64> {
    let out = net.predict(&ckpt.params, val, 64)?;
    let pred: Vec<f64> = out.predictions.iter().map(|p| p * ckpt.label_scale).collect();
    mape(&labels(val), &pred)
}

fn fit(
    net: &Network,
    start: ModelCheckpoint,
    train: &[&SampleTensor],
    val: &[&SampleTensor],
    cfg: &TrainConfig,
    seed: u64,
    adapt: Option<Adaptation<'_>>,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: start,
            history: Vec::new(),
            batch_losses: Vec::new(),
            untrained: true,
        });
    }
    if let Some(a) = &adapt {
        require_nonempty(a.source, "source-domain")?;
    }
    let scale = start.label_scale;
    let targets: Vec<f64> = train.iter().map(|s| s.label as f64 / scale).collect();
    let mut current = start;
    let mut best: Option<(f64, ModelCheckpoint)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, "batch-order", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let locus = |e: Error| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            };
            let batch: Vec<&SampleTensor> = idx.iter().map(|&i| train[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let params = &mut current.params;
            params.zero_grad();
            let mut dropout = rng_for(seed, "dropout", step);
            let (out, cache) = net.forward(params, &batch, Some(&mut dropout))?;
            let (mut loss, d_pred) = mse_loss(&out.predictions, &y)?;
            match &adapt {
                None => net.backward(params, &cache, &d_pred, None)?,
                Some(a) => {
                    let mut pick = rng_for(seed, "source-batch", step);
                    let k = cfg.batch_size.min(a.source.len());
                    let src: Vec<&SampleTensor> =
                        sample(&mut pick, a.source.len(), k).into_iter().map(|i| a.source[i]).collect();
                    let mut src_dropout = rng_for(seed, "source-dropout", step);
                    let (src_out, src_cache) = net.forward(params, &src, Some(&mut src_dropout))?;
                    let (mmd, d_src, d_tgt) = mmd_squared_with_grad(&src_out.embedding, &out.embedding)?;
                    let w = a.weight;
                    loss += w * mmd;
                    let d_tgt = d_tgt.map(|g| g * w);
                    let d_src = d_src.map(|g| g * w);
                    net.backward(params, &cache, &d_pred, Some(&d_tgt))?;
                    net.backward(params, &src_cache, &vec![0.0; src.len()], Some(&d_src))?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}, batch {b}: non-finite loss {loss}")));
            }
            params.adam_step(&cfg.adam).map_err(locus)?;
            batch_losses.push(loss);
            epoch_loss += loss;
            n_batches += 1;
            step += 1;
        }
        let val_mape = validation_mape(net, &current, val)?;
        if !val_mape.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: non-finite validation MAPE")));
        }
        let train_loss = epoch_loss / n_batches as f64;
        log::debug!("epoch {epoch}: train loss {train_loss:.6}, val mape {val_mape:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mape,
        });
        if best.as_ref().map_or(true, |(m, _)| val_mape < *m) {
            let mut snapshot = current.clone();
            snapshot.best_epoch = Some(epoch);
            best = Some((val_mape, snapshot));
        }
        let best_epoch = best.as_ref().and_then(|(_, c)| c.best_epoch).unwrap_or(epoch);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    let (_, mut checkpoint) = best.expect("at least one epoch ran");
    checkpoint.params.reset_optimizer();
    Ok(TrainOutcome {
        checkpoint,
        history,
        batch_losses,
        untrained: false,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::models::testing::toy_fleet;
    use crate::models::{CyclePatchConfig, InterEncoder, MlpConfig};

    fn small_cp() -> ModelSpec {
        ModelSpec::Cpmlp(CyclePatchConfig {
            d1: 8,
            d2: 8,
            intra_layers: 1,
            inter: InterEncoder::MlpStack { layers: 1, hidden: 8 },
            ..CyclePatchConfig::default()
        })
    }

    fn refs(v: &[SampleTensor]) -> Vec<&SampleTensor> {
        v.iter().collect()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let fleet = toy_fleet(6, &[5], &mut ChaCha8Rng::seed_from_u64(0));
        let r = refs(&fleet);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_model(&small_cp(), &r[..4], &r[4..], &cfg, 3).unwrap();
        assert!(out.untrained);
        let net = Network::from_spec(&small_cp()).unwrap().unwrap();
        assert_eq!(out.checkpoint.params, net.init(derive_seed(3, "init", 0)));
    }

    #[test]
    fn deterministic_and_selects_best_validation_epoch() {
        let fleet = toy_fleet(20, &[4], &mut ChaCha8Rng::seed_from_u64(1));
        let r = refs(&fleet);
        let mut spec = small_cp();
        if let ModelSpec::Cpmlp(c) = &mut spec {
            c.dropout = 0.1;
        }
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 4,
            patience: None,
            ..TrainConfig::default()
        };
        let a = train_model(&spec, &r[..14], &r[14..], &cfg, 9).unwrap();
        let b = train_model(&spec, &r[..14], &r[14..], &cfg, 9).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.batch_losses, b.batch_losses);
        let best = a.checkpoint.best_epoch.unwrap();
        let best_val = a.history[best - 1].val_mape;
        assert!(a.history.iter().all(|h| best_val <= h.val_mape));
        assert_eq!(a.history.len(), 15);
    }

    #[test]
    fn patience_stops_early() {
        let fleet = toy_fleet(10, &[3], &mut ChaCha8Rng::seed_from_u64(2));
        let r = refs(&fleet);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            patience: Some(2),
            adam: AdamConfig { lr: 0.5, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let out = train_model(&small_cp(), &r[..7], &r[7..], &cfg, 0);
        if let Ok(out) = out {
            let best = out.checkpoint.best_epoch.unwrap();
            assert!(out.history.len() <= best + 2);
        }
    }

    #[test]
    fn divergence_reports_locus() {
        let fleet = toy_fleet(10, &[3], &mut ChaCha8Rng::seed_from_u64(3));
        let r = refs(&fleet);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            patience: None,
            adam: AdamConfig { lr: 1e300, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let err = train_model(&small_cp(), &r[..7], &r[7..], &cfg, 0).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numerical(_)), "{msg}");
        assert!(msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn dummy_trains_to_mean() {
        let fleet = toy_fleet(6, &[2], &mut ChaCha8Rng::seed_from_u64(4));
        let r = refs(&fleet);
        let out = train_model(&ModelSpec::Dummy, &r[..4], &r[4..], &TrainConfig::default(), 0).unwrap();
        let mean = r[..4].iter().map(|s| s.label as f64).sum::<f64>() / 4.0;
        assert_eq!(out.checkpoint.predict(&r[4..5]).unwrap().predictions, vec![mean]);
    }

    #[test]
    fn overfits_small_fleet() {
        let fleet = toy_fleet(32, &[8], &mut ChaCha8Rng::seed_from_u64(5));
        let r = refs(&fleet);
        let spec = ModelSpec::Cpmlp(CyclePatchConfig {
            d1: 16,
            d2: 16,
            intra_layers: 2,
            inter: InterEncoder::MlpStack { layers: 2, hidden: 32 },
            ..CyclePatchConfig::default()
        });
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            patience: None,
            ..TrainConfig::default()
        };
        // Validating on the training set makes the selected checkpoint the best fit.
        let out = train_model(&spec, &r, &r, &cfg, 1).unwrap();
        let pred = out.checkpoint.predict(&r).unwrap().predictions;
        let truth: Vec<f64> = r.iter().map(|s| s.label as f64).collect();
        let m = mape(&truth, &pred).unwrap();
        assert!(m < 0.05, "training MAPE {m}");
    }

    #[test]
    fn mlp_family_trains() {
        let fleet = toy_fleet(8, &[2], &mut ChaCha8Rng::seed_from_u64(6));
        let r = refs(&fleet);
        let spec = ModelSpec::Mlp(MlpConfig { d: 4, layers: 1, ..MlpConfig::default() });
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let out = train_model(&spec, &r[..6], &r[6..], &cfg, 0).unwrap();
        assert_eq!(out.history.len(), 3);
    }
}
