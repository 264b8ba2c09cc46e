//! Parameterized building blocks shared by the networks.

use rand_chacha::ChaCha8Rng;

use crate::diffkernel::ops::{
    affine_backward, affine_forward, dropout_mask, hadamard, layer_norm_backward, layer_norm_forward,
    relu_backward, relu_forward, scale_shift_backward, scale_shift_forward, LayerNormCache,
};
use crate::diffkernel::{ParameterSet, Tensor2D};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            d_in,
            d_out,
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParameterSet<T>, seed: u64) {
        params.insert_uniform(&self.weight, self.d_out, self.d_in, self.d_in, seed);
        params.insert_uniform(&self.bias, 1, self.d_out, self.d_in, seed);
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterSet<T>, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        affine_forward(x, params.value(&self.weight), params.value(&self.bias))
    }

    /// Accumulates weight and bias gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        x: &Tensor2D<T>,
        dy: &Tensor2D<T>,
        want_dx: bool,
    ) -> Result<Option<Tensor2D<T>>> {
        let g = affine_backward(x, params.value(&self.weight), dy, want_dx)?;
        params.accumulate(&self.weight, &g.dw)?;
        params.accumulate(&self.bias, &g.db)?;
        Ok(g.dx)
    }

    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    pub affine: bool,
}

/// `LN(W₂ σ(W₁ z + b₁) + b₂ + z)`, optionally with dropout after σ and a learned
/// gain/bias after the normalization.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    fc1: Linear,
    fc2: Linear,
    gain: String,
    shift: String,
    norm: NormSettings,
    dropout: f64,
}

pub struct BlockCache<T> {
    x: Tensor2D<T>,
    pre_act: Tensor2D<T>,
    mask: Option<Tensor2D<T>>,
    hidden: Tensor2D<T>,
    ln: LayerNormCache<T>,
    normalized: Tensor2D<T>,
}

impl ResidualBlock {
    pub fn new(name: &str, width: usize, inner: usize, norm: NormSettings, dropout: f64) -> Self {
        ResidualBlock {
            fc1: Linear::new(&format!("{name}.fc1"), width, inner),
            fc2: Linear::new(&format!("{name}.fc2"), inner, width),
            gain: format!("{name}.ln.gain"),
            shift: format!("{name}.ln.bias"),
            norm,
            dropout,
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut ParameterSet<T>, seed: u64) {
        self.fc1.init(params, seed);
        self.fc2.init(params, seed);
        if self.norm.affine {
            params.insert(&self.gain, Tensor2D::row_vector(vec![T::one(); self.fc1.d_in]));
            params.insert(&self.shift, Tensor2D::zeros(1, self.fc1.d_in));
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        x: &Tensor2D<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor2D<T>, BlockCache<T>)> {
        let pre_act = self.fc1.forward(params, x)?;
        let act = relu_forward(&pre_act);
        let (hidden, mask) = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let m = dropout_mask(act.rows(), act.cols(), self.dropout, rng);
                (hadamard(&act, &m)?, Some(m))
            }
            _ => (act, None),
        };
        let mut r = self.fc2.forward(params, &hidden)?;
        r.add_assign(x)?;
        let (normalized, ln) = layer_norm_forward(&r, T::of(self.norm.eps))?;
        let out = if self.norm.affine {
            scale_shift_forward(&normalized, params.value(&self.gain), params.value(&self.shift))?
        } else {
            normalized.clone()
        };
        let cache = BlockCache {
            x: x.clone(),
            pre_act,
            mask,
            hidden,
            ln,
            normalized,
        };
        Ok((out, cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParameterSet<T>,
        cache: &BlockCache<T>,
        dy: &Tensor2D<T>,
    ) -> Result<Tensor2D<T>> {
        let d_norm = if self.norm.affine {
            let (dx, dg, db) = scale_shift_backward(&cache.normalized, params.value(&self.gain), dy)?;
            params.accumulate(&self.gain, &dg)?;
            params.accumulate(&self.shift, &db)?;
            dx
        } else {
            dy.clone()
        };
        let dr = layer_norm_backward(&cache.ln, &d_norm)?;
        let d_hidden = self.fc2.backward(params, &cache.hidden, &dr, true)?.expect("dx requested");
        let d_act = match &cache.mask {
            Some(m) => hadamard(&d_hidden, m)?,
            None => d_hidden,
        };
        let d_pre = relu_backward(&cache.pre_act, &d_act)?;
        let mut dx = self.fc1.backward(params, &cache.x, &d_pre, true)?.expect("dx requested");
        dx.add_assign(&dr)?;
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + if self.norm.affine { 2 * self.fc1.d_in } else { 0 }
    }
}
