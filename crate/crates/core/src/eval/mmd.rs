//! Squared maximum mean discrepancy between embedding sets.

use crate::diffkernel::Tensor2D;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows; 1 when undefined or zero.
pub fn median_bandwidth<T: Scalar>(x: &Tensor2D<T>, y: &Tensor2D<T>) -> T {
    let rows: Vec<&[T]> = (0..x.rows()).map(|i| x.row(i)).chain((0..y.rows()).map(|i| y.row(i))).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).as_f64().sqrt());
        }
    }
    if d.is_empty() {
        return T::one();
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 && med.is_finite() {
        T::of(med)
    } else {
        T::one()
    }
}

fn check<T: Scalar>(x: &Tensor2D<T>, y: &Tensor2D<T>) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InsufficientData("mmd needs at least one row per set".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd",
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

/// Biased estimator with the Gaussian kernel `exp(−‖a−b‖² / 2σ²)` and median-heuristic σ.
pub fn mmd_squared<T: Scalar>(x: &Tensor2D<T>, y: &Tensor2D<T>) -> Result<T> {
    Ok(mmd_squared_with_grad(x, y)?.0)
}

/// Value plus gradients with respect to `x` and `y`; σ is treated as a constant.
pub fn mmd_squared_with_grad<T: Scalar>(x: &Tensor2D<T>, y: &Tensor2D<T>) -> Result<(T, Tensor2D<T>, Tensor2D<T>)> {
    check(x, y)?;
    let sigma = median_bandwidth(x, y);
    let inv = T::one() / (T::of(2.0) * sigma * sigma);
    let (n, m, d) = (x.rows(), y.rows(), x.cols());
    let mut dx = Tensor2D::zeros(n, d);
    let mut dy = Tensor2D::zeros(m, d);

    // Each term is c · Σ k(a_i, b_j); ∂k/∂a = −k (a − b) / σ².
    let term = |a: &Tensor2D<T>, b: &Tensor2D<T>, c: T, da: &mut Tensor2D<T>, db: &mut Tensor2D<T>| -> T {
        let mut ks = Vec::with_capacity(a.rows() * b.rows());
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let k = (-sq_dist(a.row(i), b.row(j)) * inv).exp();
                ks.push(k);
                let g = c * k * T::of(2.0) * inv;
                for f in 0..d {
                    let diff = a.get(i, f) - b.get(j, f);
                    da.row_mut(i)[f] -= g * diff;
                    db.row_mut(j)[f] += g * diff;
                }
            }
        }
        // Summing in sorted order makes the value independent of argument order.
        ks.sort_by(|p, q| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal));
        c * ks.into_iter().sum::<T>()
    };
    let cxx = T::one() / T::of_usize(n * n);
    let cyy = T::one() / T::of_usize(m * m);
    let cxy = -T::of(2.0) / T::of_usize(n * m);
    let mut dx2 = Tensor2D::zeros(n, d);
    let mut dy2 = Tensor2D::zeros(m, d);
    let vxx = term(x, x, cxx, &mut dx, &mut dx2);
    let vyy = term(y, y, cyy, &mut dy, &mut dy2);
    dx.add_assign(&dx2)?;
    dy.add_assign(&dy2)?;
    let vxy = term(x, y, cxy, &mut dx, &mut dy);
    Ok((vxx + vyy + vxy, dx, dy))
}
