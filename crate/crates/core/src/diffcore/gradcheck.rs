//! Central finite-difference gradient oracle.
//!
//! Only forward evaluations are used, so the oracle is independent of the
//! backward rules it is compared against. Callers evaluate their function on
//! an `f64` graph to keep truncation and rounding error well below the
//! tolerances checked.

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub step: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// where `floor = floor_frac * max_i |numeric_i|`; it keeps coordinates
    /// whose true derivative is (near) zero from dividing by zero.
    pub floor_frac: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { step: 1e-3, floor_frac: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Numerical gradient of `f` at `at`, restricted to `coords` when given.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    at: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut buf = at.data().to_vec();
    for &i in coords {
        let orig = buf[i];
        buf[i] = orig + step;
        let plus = f(&Tensor::new(at.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig - step;
        let minus = f(&Tensor::new(at.shape().to_vec(), buf.clone())?)?;
        buf[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares an analytic gradient with central differences on `coords`
/// (all coordinates when `coords` is `None`).
pub fn check_gradient(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    at: &Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: Option<&[usize]>,
    cfg: FdConfig,
) -> Result<FdReport> {
    if analytic.shape() != at.shape() {
        return Err(Error::shape(format!("gradient {:?} vs point {:?}", analytic.shape(), at.shape())));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..at.numel()).collect();
            &all
        }
    };
    let numeric = numeric_gradient(f, at, cfg.step, coords)?;
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.floor_frac * scale).max(f64::MIN_POSITIVE);
    let mut report = FdReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, numeric };
    for (k, &i) in coords.iter().enumerate() {
        let a = analytic.data()[i];
        let n = report.numeric[k];
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
