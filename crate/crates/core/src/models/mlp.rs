//! Flattened-input baseline: each channel's 30,000 padded values share one
//! embedding, residual blocks act per channel row, and the channel rows are
//! averaged before the scalar head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BlockCache, Linear, NormSettings, ResidualBlock};
use super::scaler::InputScaler;
use super::ModelOutput;
use crate::diffkernel::{ParameterSet, Tensor2D};
use crate::error::{Error, Result};
use crate::preprocess::{SampleTensor, MAX_CYCLES, N_VARS, POINTS_PER_CYCLE};
use crate::scalar::Scalar;

/// Values per channel of a padded sample.
pub const CHANNEL_LEN: usize = MAX_CYCLES * POINTS_PER_CYCLE;

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub d: usize,
    pub layers: usize,
    pub dropout: f64,
    pub ln_affine: bool,
    pub ln_eps: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            d: 16,
            layers: 2,
            dropout: 0.0,
            ln_affine: false,
            ln_eps: default_ln_eps(),
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!("mlp width must be at least 2, got {}", self.d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d;
        let ln = if self.ln_affine { 2 * d } else { 0 };
        CHANNEL_LEN * d + d + self.layers * (2 * d * d + 2 * d + ln) + d + 1
    }
}

#[derive(Debug, Clone)]
pub struct MlpBaseline {
    pub config: MlpConfig,
    embed: Linear,
    blocks: Vec<ResidualBlock>,
    head: Linear,
    scaler: Option<InputScaler>,
}

pub struct MlpCache<T> {
    n: usize,
    input: Tensor2D<T>,
    blocks: Vec<BlockCache<T>>,
    embedding: Tensor2D<T>,
}

impl MlpBaseline {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let norm = NormSettings {
            eps: config.ln_eps,
            affine: config.ln_affine,
        };
        let blocks = (0..config.layers)
            .map(|l| ResidualBlock::new(&format!("stack.{l}"), config.d, config.d, norm, config.dropout))
            .collect();
        Ok(MlpBaseline {
            embed: Linear::new("embed", CHANNEL_LEN, config.d),
            blocks,
            head: Linear::new("head", config.d, 1),
            scaler: None,
            config,
        })
    }

    /// Standardize real cycles with `scaler`; padding stays zero.
    pub fn with_scaler(mut self, scaler: Option<InputScaler>) -> Self {
        self.scaler = scaler;
        self
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        let mut p = ParameterSet::new();
        self.embed.init(&mut p, seed);
        for b in &self.blocks {
            b.init(&mut p, seed);
        }
        self.head.init(&mut p, seed);
        p
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.d
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        batch: &[&SampleTensor],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ModelOutput<T>, MlpCache<T>)> {
        let n = batch.len();
        let mut input = Tensor2D::zeros(n * N_VARS, CHANNEL_LEN);
        for (j, s) in batch.iter().enumerate() {
            for ch in 0..N_VARS {
                let src = &s.data()[ch * CHANNEL_LEN..(ch + 1) * CHANNEL_LEN];
                let row = input.row_mut(j * N_VARS + ch);
                for (d, &x) in row.iter_mut().zip(src) {
                    *d = T::of(x as f64);
                }
                if let Some(sc) = &self.scaler {
                    for (i, d) in row[..s.usable_cycles * POINTS_PER_CYCLE].iter_mut().enumerate() {
                        *d = sc.apply(ch * POINTS_PER_CYCLE + i % POINTS_PER_CYCLE, *d);
                    }
                }
            }
        }
        let mut z = self.embed.forward(params, &input)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, cache) = b.forward(params, &z, rng.as_deref_mut())?;
            blocks.push(cache);
            z = out;
        }
        let d = self.config.d;
        let third = T::one() / T::of_usize(N_VARS);
        let embedding = Tensor2D::from_fn(n, d, |j, c| {
            (0..N_VARS).map(|ch| z.get(j * N_VARS + ch, c)).sum::<T>() * third
        });
        let pred = self.head.forward(params, &embedding)?;
        let out = ModelOutput {
            predictions: pred.into_vec(),
            embedding: embedding.clone(),
        };
        Ok((
            out,
            MlpCache {
                n,
                input,
                blocks,
                embedding,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        cache: &MlpCache<T>,
        d_pred: &[T],
        d_embedding: Option<&Tensor2D<T>>,
    ) -> Result<()> {
        let dy = Tensor2D::new(cache.n, 1, d_pred.to_vec())?;
        let mut dv = self.head.backward(params, &cache.embedding, &dy, true)?.expect("dx requested");
        if let Some(de) = d_embedding {
            dv.add_assign(de)?;
        }
        let third = T::one() / T::of_usize(N_VARS);
        let mut dz = Tensor2D::from_fn(cache.n * N_VARS, self.config.d, |r, c| dv.get(r / N_VARS, c) * third);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dz = b.backward(params, c, &dz)?;
        }
        self.embed.backward(params, &cache.input, &dz, false)?;
        Ok(())
    }
}
