//! Cycle-as-token network: shared per-cycle embedding, intra-cycle residual
//! blocks, then an inter-cycle encoder over the zero-padded token matrix.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BlockCache, Linear, NormSettings, ResidualBlock};
use super::scaler::InputScaler;
use super::ModelOutput;
use crate::diffkernel::{ParameterSet, Tensor2D};
use crate::error::{Error, Result};
use crate::preprocess::{SampleTensor, MAX_CYCLES, TOKEN_LEN};
use crate::scalar::Scalar;

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterEncoder {
    /// Affine map of the flattened `100 × D1` matrix to `hidden`, then `layers` residual blocks.
    MlpStack { layers: usize, hidden: usize },
    /// Mean pooling over the cycle embeddings.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CyclePatchConfig {
    pub d1: usize,
    pub d2: usize,
    pub intra_layers: usize,
    pub inter: InterEncoder,
    pub dropout: f64,
    pub disable_intra: bool,
    pub disable_inter: bool,
    pub ln_affine: bool,
    pub ln_eps: f64,
}

impl Default for CyclePatchConfig {
    fn default() -> Self {
        CyclePatchConfig {
            d1: 16,
            d2: 32,
            intra_layers: 2,
            inter: InterEncoder::MlpStack { layers: 2, hidden: 32 },
            dropout: 0.0,
            disable_intra: false,
            disable_inter: false,
            ln_affine: false,
            ln_eps: default_ln_eps(),
        }
    }
}

impl CyclePatchConfig {
    pub fn effective_intra_layers(&self) -> usize {
        if self.disable_intra {
            0
        } else {
            self.intra_layers
        }
    }

    /// `(layers, hidden)` of the inter-cycle stack, or `None` when pooling.
    pub fn effective_inter(&self) -> Option<(usize, usize)> {
        match self.inter {
            InterEncoder::MlpStack { layers, hidden } if !self.disable_inter => Some((layers, hidden)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 || self.d2 == 0 {
            return Err(Error::Config(format!("d1 and d2 must be at least 1 (got {}, {})", self.d1, self.d2)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if self.effective_intra_layers() > 0 && self.d1 < 2 {
            return Err(Error::Config("layer norm over the embedding needs d1 >= 2".into()));
        }
        if let Some((layers, hidden)) = self.effective_inter() {
            if hidden == 0 || (layers > 0 && hidden < 2) {
                return Err(Error::Config(format!("inter hidden width {hidden} too small for {layers} layers")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d1, d2) = (self.d1, self.d2);
        let ln = |w: usize| if self.ln_affine { 2 * w } else { 0 };
        let mut n = TOKEN_LEN * d1 + d1;
        n += self.effective_intra_layers() * (2 * d1 * d2 + d1 + d2 + ln(d1));
        match self.effective_inter() {
            Some((layers, h)) => {
                n += MAX_CYCLES * d1 * h + h;
                n += layers * (2 * h * h + 2 * h + ln(h));
                n += h + 1;
            }
            None => n += d1 + 1,
        }
        n
    }
}

/// Split a sample into its `S` cycle tokens (`S × 900`), padding slots excluded.
pub fn segment<T: Scalar>(sample: &SampleTensor) -> Tensor2D<T> {
    let s = sample.usable_cycles;
    let mut out = Tensor2D::zeros(s, TOKEN_LEN);
    for c in 0..s {
        sample.write_token(c, out.row_mut(c));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CyclePatch {
    pub config: CyclePatchConfig,
    embed: Linear,
    intra: Vec<ResidualBlock>,
    inter_in: Option<Linear>,
    inter: Vec<ResidualBlock>,
    head: Linear,
    scaler: Option<InputScaler>,
}

pub struct CyclePatchCache<T> {
    counts: Vec<usize>,
    tokens: Tensor2D<T>,
    intra: Vec<BlockCache<T>>,
    /// Flattened padded `H` (one row per sample) when the inter stack is active.
    padded: Option<Tensor2D<T>>,
    inter: Vec<BlockCache<T>>,
    embedding: Tensor2D<T>,
}

impl CyclePatch {
    pub fn new(config: CyclePatchConfig) -> Result<Self> {
        config.validate()?;
        let norm = NormSettings {
            eps: config.ln_eps,
            affine: config.ln_affine,
        };
        let d1 = config.d1;
        let intra = (0..config.effective_intra_layers())
            .map(|l| ResidualBlock::new(&format!("intra.{l}"), d1, config.d2, norm, config.dropout))
            .collect();
        let (inter_in, inter, head) = match config.effective_inter() {
            Some((layers, h)) => (
                Some(Linear::new("inter.in", MAX_CYCLES * d1, h)),
                (0..layers)
                    .map(|l| ResidualBlock::new(&format!("inter.{l}"), h, h, norm, config.dropout))
                    .collect(),
                Linear::new("head", h, 1),
            ),
            None => (None, Vec::new(), Linear::new("head", d1, 1)),
        };
        Ok(CyclePatch {
            embed: Linear::new("embed", TOKEN_LEN, d1),
            intra,
            inter_in,
            inter,
            head,
            scaler: None,
            config,
        })
    }

    /// Standardize every token with `scaler` before the embedding.
    pub fn with_scaler(mut self, scaler: Option<InputScaler>) -> Self {
        self.scaler = scaler;
        self
    }

    fn tokens<T: Scalar>(&self, sample: &SampleTensor) -> Tensor2D<T> {
        let mut t = segment::<T>(sample);
        if let Some(sc) = &self.scaler {
            for r in 0..t.rows() {
                sc.apply_token(t.row_mut(r));
            }
        }
        t
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ParameterSet<T> {
        let mut p = ParameterSet::new();
        self.embed.init(&mut p, seed);
        for b in &self.intra {
            b.init(&mut p, seed);
        }
        if let Some(l) = &self.inter_in {
            l.init(&mut p, seed);
        }
        for b in &self.inter {
            b.init(&mut p, seed);
        }
        self.head.init(&mut p, seed);
        p
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.d_in
    }

    /// Per-token embeddings after the intra-cycle encoder (`S × D1`), inference mode.
    pub fn token_embeddings<T: Scalar>(&self, params: &ParameterSet<T>, sample: &SampleTensor) -> Result<Tensor2D<T>> {
        let mut z = self.embed.forward(params, &self.tokens::<T>(sample))?;
        for b in &self.intra {
            z = b.forward(params, &z, None)?.0;
        }
        Ok(z)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        batch: &[&SampleTensor],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ModelOutput<T>, CyclePatchCache<T>)> {
        let counts: Vec<usize> = batch.iter().map(|s| s.usable_cycles).collect();
        let total: usize = counts.iter().sum();
        let mut tokens = Tensor2D::zeros(total, TOKEN_LEN);
        let mut r = 0;
        for s in batch {
            for c in 0..s.usable_cycles {
                s.write_token(c, tokens.row_mut(r));
                if let Some(sc) = &self.scaler {
                    sc.apply_token(tokens.row_mut(r));
                }
                r += 1;
            }
        }
        let mut z = self.embed.forward(params, &tokens)?;
        let mut intra = Vec::with_capacity(self.intra.len());
        for b in &self.intra {
            let (out, cache) = b.forward(params, &z, rng.as_deref_mut())?;
            intra.push(cache);
            z = out;
        }
        let d1 = self.config.d1;
        let n = batch.len();
        let (padded, inter, embedding) = match &self.inter_in {
            Some(inter_in) => {
                let mut h = Tensor2D::zeros(n, MAX_CYCLES * d1);
                let mut r = 0;
                for (j, &s) in counts.iter().enumerate() {
                    for t in 0..s {
                        h.row_mut(j)[t * d1..(t + 1) * d1].copy_from_slice(z.row(r));
                        r += 1;
                    }
                }
                let mut u = inter_in.forward(params, &h)?;
                let mut caches = Vec::with_capacity(self.inter.len());
                for b in &self.inter {
                    let (out, cache) = b.forward(params, &u, rng.as_deref_mut())?;
                    caches.push(cache);
                    u = out;
                }
                (Some(h), caches, u)
            }
            None => {
                let mut v = Tensor2D::zeros(n, d1);
                let mut r = 0;
                for (j, &s) in counts.iter().enumerate() {
                    let inv = T::one() / T::of_usize(s);
                    for _ in 0..s {
                        for (acc, &x) in v.row_mut(j).iter_mut().zip(z.row(r)) {
                            *acc += x * inv;
                        }
                        r += 1;
                    }
                }
                (None, Vec::new(), v)
            }
        };
        let pred = self.head.forward(params, &embedding)?;
        let out = ModelOutput {
            predictions: pred.into_vec(),
            embedding: embedding.clone(),
        };
        let cache = CyclePatchCache {
            counts,
            tokens,
            intra,
            padded,
            inter,
            embedding,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients given `dL/dŷ` and, optionally, `dL/dv`.
    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        cache: &CyclePatchCache<T>,
        d_pred: &[T],
        d_embedding: Option<&Tensor2D<T>>,
    ) -> Result<()> {
        let n = cache.counts.len();
        let dy = Tensor2D::new(n, 1, d_pred.to_vec())?;
        let mut dv = self.head.backward(params, &cache.embedding, &dy, true)?.expect("dx requested");
        if let Some(de) = d_embedding {
            dv.add_assign(de)?;
        }
        let d1 = self.config.d1;
        let total: usize = cache.counts.iter().sum();
        let mut dz = Tensor2D::zeros(total, d1);
        match (&self.inter_in, &cache.padded) {
            (Some(inter_in), Some(h)) => {
                for (b, c) in self.inter.iter().zip(&cache.inter).rev() {
                    dv = b.backward(params, c, &dv)?;
                }
                let dh = inter_in.backward(params, h, &dv, true)?.expect("dx requested");
                let mut r = 0;
                for (j, &s) in cache.counts.iter().enumerate() {
                    for t in 0..s {
                        dz.row_mut(r).copy_from_slice(&dh.row(j)[t * d1..(t + 1) * d1]);
                        r += 1;
                    }
                }
            }
            _ => {
                let mut r = 0;
                for (j, &s) in cache.counts.iter().enumerate() {
                    let inv = T::one() / T::of_usize(s);
                    for _ in 0..s {
                        for (o, &g) in dz.row_mut(r).iter_mut().zip(dv.row(j)) {
                            *o = g * inv;
                        }
                        r += 1;
                    }
                }
            }
        }
        for (b, c) in self.intra.iter().zip(&cache.intra).rev() {
            dz = b.backward(params, c, &dz)?;
        }
        self.embed.backward(params, &cache.tokens, &dz, false)?;
        Ok(())
    }
}
