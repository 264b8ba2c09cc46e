//! Differentiable operations. Every forward has a matching backward that takes the
//! upstream gradient and whatever the forward cached.

use rand::Rng;

use super::tensor::{axpy, dot, Tensor2D};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `y = x Wᵀ + b`, with `x: n×d_in`, `W: d_out×d_in`, `b: 1×d_out`.
pub fn affine_forward<T: Scalar>(x: &Tensor2D<T>, w: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if x.cols() != w.cols() {
        return Err(Error::Shape {
            op: "affine input",
            left: x.shape(),
            right: w.shape(),
        });
    }
    if b.shape() != (1, w.rows()) {
        return Err(Error::Shape {
            op: "affine bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let (n, d_out) = (x.rows(), w.rows());
    let mut y = Tensor2D::zeros(n, d_out);
    let bias = b.as_slice();
    for i in 0..n {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        for o in 0..d_out {
            yi[o] = dot(xi, w.row(o)) + bias[o];
        }
    }
    Ok(y)
}

pub struct AffineGrads<T> {
    pub dx: Option<Tensor2D<T>>,
    pub dw: Tensor2D<T>,
    pub db: Tensor2D<T>,
}

/// Gradients of `affine_forward`. `dx` is skipped when the input is data.
pub fn affine_backward<T: Scalar>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    dy: &Tensor2D<T>,
    want_dx: bool,
) -> Result<AffineGrads<T>> {
    if dy.shape() != (x.rows(), w.rows()) || x.cols() != w.cols() {
        return Err(Error::Shape {
            op: "affine backward",
            left: x.shape(),
            right: dy.shape(),
        });
    }
    let (n, d_out) = dy.shape();
    let mut dw = Tensor2D::zeros(d_out, w.cols());
    let mut db = vec![T::zero(); d_out];
    for i in 0..n {
        let xi = x.row(i);
        let dyi = dy.row(i);
        for o in 0..d_out {
            let g = dyi[o];
            if g != T::zero() {
                axpy(dw.row_mut(o), g, xi);
            }
            db[o] += g;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor2D::zeros(n, w.cols());
        for i in 0..n {
            let dyi = dy.row(i);
            let dxi = dx.row_mut(i);
            for o in 0..d_out {
                if dyi[o] != T::zero() {
                    axpy(dxi, dyi[o], w.row(o));
                }
            }
        }
        dx
    });
    Ok(AffineGrads {
        dx,
        dw,
        db: Tensor2D::row_vector(db),
    })
}

pub struct LayerNormCache<T> {
    pub normalized: Tensor2D<T>,
    pub inv_std: Vec<T>,
}

/// Per-row `(x − mean) / sqrt(var + eps)` with the biased variance.
pub fn layer_norm_forward<T: Scalar>(x: &Tensor2D<T>, eps: T) -> Result<(Tensor2D<T>, LayerNormCache<T>)> {
    if x.cols() < 2 {
        return Err(Error::Domain(format!(
            "layer normalization needs at least 2 columns, got {}",
            x.cols()
        )));
    }
    let d = T::of_usize(x.cols());
    let mut out = Tensor2D::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let s = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv_std.push(s);
    }
    let cache = LayerNormCache {
        normalized: out.clone(),
        inv_std,
    };
    Ok((out, cache))
}

pub fn layer_norm_backward<T: Scalar>(cache: &LayerNormCache<T>, dy: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    cache.normalized.require_same_shape(dy, "layer norm backward")?;
    let cols = dy.cols();
    let d = T::of_usize(cols);
    let mut dx = Tensor2D::zeros(dy.rows(), cols);
    for r in 0..dy.rows() {
        let g = dy.row(r);
        let xh = cache.normalized.row(r);
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = dot(g, xh);
        let s = cache.inv_std[r] / d;
        for ((o, &gi), &xi) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
            *o = s * (d * gi - sum_g - xi * sum_gx);
        }
    }
    Ok(dx)
}

pub fn relu_forward<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Scalar>(pre: &Tensor2D<T>, dy: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    pre.require_same_shape(dy, "relu backward")?;
    let mut dx = dy.clone();
    for (g, &p) in dx.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if !(p > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(dx)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse",
            left: (pred.len(), 1),
            right: (target.len(), 1),
        });
    }
    let n = T::of_usize(pred.len());
    let two = T::of(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Inverted-dropout mask: zeros with probability `rate`, `1 / (1 − rate)` otherwise.
pub fn dropout_mask<T: Scalar, R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor2D<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    Tensor2D::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < rate { T::zero() } else { keep })
}

pub fn hadamard<T: Scalar>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    a.require_same_shape(b, "hadamard")?;
    let mut out = a.clone();
    for (o, &m) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= m;
    }
    Ok(out)
}

/// `x * gain + bias` broadcast over rows; gain and bias are `1 × cols`.
pub fn scale_shift_forward<T: Scalar>(x: &Tensor2D<T>, gain: &Tensor2D<T>, bias: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
        return Err(Error::Shape {
            op: "scale-shift",
            left: x.shape(),
            right: gain.shape(),
        });
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gain.as_slice()).zip(bias.as_slice()) {
            *o = *o * g + b;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgain, dbias)`.
pub fn scale_shift_backward<T: Scalar>(
    x: &Tensor2D<T>,
    gain: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>, Tensor2D<T>)> {
    x.require_same_shape(dy, "scale-shift backward")?;
    let cols = x.cols();
    let mut dx = dy.clone();
    let mut dg = vec![T::zero(); cols];
    let mut db = vec![T::zero(); cols];
    for r in 0..x.rows() {
        for c in 0..cols {
            let g = dy.get(r, c);
            dg[c] += g * x.get(r, c);
            db[c] += g;
        }
        for (o, &g) in dx.row_mut(r).iter_mut().zip(gain.as_slice()) {
            *o *= g;
        }
    }
    Ok((dx, Tensor2D::row_vector(dg), Tensor2D::row_vector(db)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::testing::{fd_check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_affine_is_identity() {
        let x = Tensor2D::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.0);
        let w = Tensor2D::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let y = affine_forward(&x, &w, &Tensor2D::zeros(1, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(3, 5, &mut rng);
        let b = random_tensor(1, 3, &mut rng);
        let y = affine_forward(&Tensor2D::zeros(4, 5), &w, &b).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), b.as_slice());
        }
    }

    #[test]
    fn affine_shape_errors_name_shapes() {
        let err = affine_forward(&Tensor2D::<f64>::zeros(2, 3), &Tensor2D::zeros(4, 5), &Tensor2D::zeros(1, 4))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 5)"), "{msg}");
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(3, 5, &mut rng);
        let w = random_tensor(4, 5, &mut rng);
        let b = random_tensor(1, 4, &mut rng);
        let probe = random_tensor(3, 4, &mut rng);
        // Scalar objective L = <probe, affine(x, w, b)>.
        let loss = |x: &Tensor2D<f64>, w: &Tensor2D<f64>, b: &Tensor2D<f64>| {
            dot(affine_forward(x, w, b).unwrap().as_slice(), probe.as_slice())
        };
        let g = affine_backward(&x, &w, &probe, true).unwrap();
        assert!(fd_check(&x, |t| loss(t, &w, &b), g.dx.as_ref().unwrap()) < 1e-6);
        assert!(fd_check(&w, |t| loss(&x, t, &b), &g.dw) < 1e-6);
        assert!(fd_check(&b, |t| loss(&x, &w, t), &g.db) < 1e-6);
    }

    #[test]
    fn layer_norm_fixed_point_and_constant_rows() {
        let x = Tensor2D::row_vector(vec![-1.0f64, 1.0, -1.0, 1.0]);
        let (y, _) = layer_norm_forward(&x, 1e-12).unwrap();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (y, _) = layer_norm_forward(&Tensor2D::row_vector(vec![3.0f64; 6]), 1e-5).unwrap();
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(layer_norm_forward(&Tensor2D::<f64>::zeros(3, 1), 1e-5).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(6, 9, &mut rng);
        let eps = 1e-5;
        let (y, cache) = layer_norm_forward(&x, eps).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 9.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            let raw_var = 1.0 / cache.inv_std[r].powi(2) - eps;
            assert!((var - raw_var / (raw_var + eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(4, 8, &mut rng);
        let probe = random_tensor(4, 8, &mut rng);
        let (_, cache) = layer_norm_forward(&x, 1e-5).unwrap();
        let dx = layer_norm_backward(&cache, &probe).unwrap();
        let err = fd_check(&x, |t| dot(layer_norm_forward(t, 1e-5).unwrap().0.as_slice(), probe.as_slice()), &dx);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn relu_cases() {
        let pos = Tensor2D::row_vector(vec![0.0, 1.0, 2.5]);
        assert_eq!(relu_forward(&pos), pos);
        let neg = Tensor2D::row_vector(vec![0.0, -1.0, -2.5]);
        assert!(relu_forward(&neg).as_slice().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = random_tensor(5, 6, &mut rng);
        // Keep the finite-difference probe away from the kink.
        x.as_mut_slice().iter_mut().for_each(|v| if v.abs() < 1e-3 { *v = 0.5 });
        let probe = random_tensor(5, 6, &mut rng);
        let dx = relu_backward(&x, &probe).unwrap();
        let err = fd_check(&x, |t| dot(relu_forward(t).as_slice(), probe.as_slice()), &dx);
        assert!(err < 1e-6);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(mse_loss(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap().0, 1.0);
        assert!(mse_loss::<f64>(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse_loss::<f64>(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_tensor(1, 7, &mut rng);
        let t = random_tensor(1, 7, &mut rng);
        let (_, g) = mse_loss(p.as_slice(), t.as_slice()).unwrap();
        let err = fd_check(&p, |x| mse_loss(x.as_slice(), t.as_slice()).unwrap().0, &Tensor2D::row_vector(g));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn mse_is_permutation_invariant() {
        let p = [0.3, -1.2, 4.0, 2.2, 0.0];
        let t = [1.0, 1.0, -3.5, 2.0, 0.25];
        let perm = [3, 0, 4, 1, 2];
        let pp: Vec<f64> = perm.iter().map(|&k| p[k]).collect();
        let tp: Vec<f64> = perm.iter().map(|&k| t[k]).collect();
        let a = mse_loss(&p, &t).unwrap().0;
        let b = mse_loss(&pp, &tp).unwrap().0;
        assert!((a - b).abs() <= 1e-15 * a);
    }

    #[test]
    fn scale_shift_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(3, 4, &mut rng);
        let g = random_tensor(1, 4, &mut rng);
        let b = random_tensor(1, 4, &mut rng);
        let probe = random_tensor(3, 4, &mut rng);
        let f = |x: &Tensor2D<f64>, g: &Tensor2D<f64>, b: &Tensor2D<f64>| {
            dot(scale_shift_forward(x, g, b).unwrap().as_slice(), probe.as_slice())
        };
        let (dx, dg, db) = scale_shift_backward(&x, &g, &probe).unwrap();
        assert!(fd_check(&x, |t| f(t, &g, &b), &dx) < 1e-6);
        assert!(fd_check(&g, |t| f(&x, t, &b), &dg) < 1e-6);
        assert!(fd_check(&b, |t| f(&x, &g, t), &db) < 1e-6);
    }
}
