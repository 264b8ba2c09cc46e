use rand::Rng;

use super::tensor::Tensor2D;

pub fn random_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D<f64> {
    Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Normwise relative error between `analytic` and central differences of `f` at `x`.
pub fn fd_check(x: &Tensor2D<f64>, f: impl Fn(&Tensor2D<f64>) -> f64, analytic: &Tensor2D<f64>) -> f64 {
    let h = 1e-5;
    let mut probe = x.clone();
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        let num = (up - down) / (2.0 * h);
        err = err.max((num - analytic.as_slice()[k]).abs());
        scale = scale.max(num.abs());
    }
    err / scale.max(1e-300)
}
