use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Probe at most this many entries per parameter (evenly strided); `None` probes all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub probed: usize,
    pub max_abs_error: f64,
    pub max_abs_numeric: f64,
    /// `max |analytic − numeric| / max |numeric|` over the probed entries.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `objective(params, with_grad)` returns the scalar loss; when `with_grad` is true it must
/// also accumulate analytic gradients into `params`. The closure has to be deterministic.
pub fn check_gradients<T, F>(params: &mut ParameterSet<T>, mut objective: F, opts: GradCheckOptions) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&mut ParameterSet<T>, bool) -> f64,
{
    params.zero_grad();
    objective(params, true);
    let analytic: Vec<(String, Vec<T>)> = params
        .iter()
        .map(|(n, p)| (n.clone(), p.grad.as_slice().to_vec()))
        .collect();
    params.zero_grad();

    let h = opts.step;
    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let n = grad.len();
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let (mut max_err, mut max_num, mut probed) = (0.0f64, 0.0f64, 0);
        for k in (0..n).step_by(stride) {
            let orig = params.value(&name).as_slice()[k];
            params.value_mut(&name).as_mut_slice()[k] = T::of(orig.as_f64() + h);
            let up = objective(params, false);
            params.value_mut(&name).as_mut_slice()[k] = T::of(orig.as_f64() - h);
            let down = objective(params, false);
            params.value_mut(&name).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max((grad[k].as_f64() - numeric).abs());
            max_num = max_num.max(numeric.abs());
            probed += 1;
        }
        let rel_error = if max_num > 0.0 {
            max_err / max_num
        } else if max_err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        entries.push(GradCheckEntry {
            name,
            probed,
            max_abs_error: max_err,
            max_abs_numeric: max_num,
            rel_error,
            passed: rel_error <= opts.tolerance,
        });
    }
    GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    }
}
