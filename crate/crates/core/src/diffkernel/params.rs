use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor2D<T>,
    pub grad: Tensor2D<T>,
    pub m: Tensor2D<T>,
    pub v: Tensor2D<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor2D<T>) -> Self {
        let (r, c) = value.shape();
        Param {
            value,
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters in deterministic (lexicographic) order plus the optimizer step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Param<T>>,
    step: u64,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    /// Uniform in `±sqrt(1 / fan_in)`, drawn from a stream keyed by `seed` and the name.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, seed: u64) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut rng = rng_for(seed, name, 0);
        let t = Tensor2D::from_fn(rows, cols, |_, _| T::of(rng.gen_range(-bound..bound)));
        self.insert(name, t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Parameter value; the model code only asks for names it registered.
    pub fn value(&self, name: &str) -> &Tensor2D<T> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2D<T> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor2D<T> {
        &self.params[name].grad
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor2D<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        p.grad.add_assign(grad)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad.fill_zero());
    }

    /// Clear gradients, moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill_zero();
            p.m.fill_zero();
            p.v.fill_zero();
        }
        self.step = 0;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Bias-corrected Adam update, then gradients are zeroed. A non-finite gradient
    /// aborts before any parameter moves.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter {name}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for p in self.params.values_mut() {
            let Param { value, grad, m, v } = p;
            for (((x, g), m), v) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_mut_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
                *g = T::zero();
            }
        }
        Ok(())
    }

    /// Copy values (not optimizer state) from another set with identical names and shapes.
    pub fn load_values(&mut self, other: &ParameterSet<T>) -> Result<()> {
        if self.names() != other.names() {
            return Err(Error::Config(format!(
                "parameter names differ: {:?} vs {:?}",
                self.names(),
                other.names()
            )));
        }
        for (name, p) in self.params.iter_mut() {
            let src = &other.params[name].value;
            p.value.require_same_shape(src, "load parameters")?;
            p.value = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor2D::row_vector(vec![value]));
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = single(0.7);
        for _ in 0..10 {
            ps.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.value("w").as_slice(), &[0.7]);
        assert_eq!(ps.step(), 10);
    }

    #[test]
    fn first_step_is_lr_times_normalized_gradient() {
        // m̂ = g and v̂ = g² after one step, so Δ = −lr·g/(|g| + eps).
        for g in [3.0, -0.02, 1e-3] {
            let mut ps = single(0.0);
            ps.accumulate("w", &Tensor2D::row_vector(vec![g])).unwrap();
            let cfg = AdamConfig::default();
            ps.adam_step(&cfg).unwrap();
            let expect = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((ps.value("w").get(0, 0) - expect).abs() < 1e-15);
            assert_eq!(ps.grad("w").get(0, 0), 0.0);
        }
    }

    #[test]
    fn constant_gradient_trajectory_matches_closed_form() {
        // With constant g: m_t = (1−β1^t) g and v_t = (1−β2^t) g², so every bias-corrected
        // step is exactly −lr·g/(|g| + eps) and the parameter moves linearly.
        let cfg = AdamConfig::default();
        let g = 0.37;
        let mut ps = single(1.0);
        let mut prev = 1.0;
        for t in 1..=200 {
            ps.accumulate("w", &Tensor2D::row_vector(vec![g])).unwrap();
            ps.adam_step(&cfg).unwrap();
            let x = ps.value("w").get(0, 0);
            let step = x - prev;
            assert!(step < 0.0);
            assert!((step + cfg.lr * g / (g + cfg.eps)).abs() < 1e-12, "step {t}: {step}");
            prev = x;
        }
        assert!((prev - (1.0 - 200.0 * cfg.lr * g / (g + cfg.eps))).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = single(1.0);
        ps.insert("b", Tensor2D::row_vector(vec![0.0]));
        ps.accumulate("b", &Tensor2D::row_vector(vec![f64::NAN])).unwrap();
        let err = ps.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains('b')));
        assert_eq!(ps.value("w").get(0, 0), 1.0);
        assert_eq!(ps.step(), 0);
    }

    #[test]
    fn uniform_init_is_bounded_and_keyed_by_name() {
        let mut a = ParameterSet::<f64>::new();
        a.insert_uniform("x", 10, 25, 25, 3);
        a.insert_uniform("y", 10, 25, 25, 3);
        assert!(a.value("x").as_slice().iter().all(|v| v.abs() <= 0.2));
        assert_ne!(a.value("x"), a.value("y"));
        let mut b = ParameterSet::<f64>::new();
        b.insert_uniform("x", 10, 25, 25, 3);
        assert_eq!(a.value("x"), b.value("x"));
    }
}
