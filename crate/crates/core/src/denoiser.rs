//! Soft thresholding `eta(r; lambda)_j = sgn(r_j) max(|r_j| - lambda, 0)`.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Output of [`soft_threshold`] with its componentwise partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftThresholdResult {
    pub value: DVector<f64>,
    /// `d eta / d r`, either 0 or 1.
    pub d_dr: DVector<f64>,
    /// `d eta / d lambda`, one of -1, 0, 1.
    pub d_dlambda: DVector<f64>,
    /// Number of nonzero outputs.
    pub nnz: usize,
}

/// Soft threshold of a single value. Exactly `0.0` when `|r| <= lambda`.
#[inline]
pub fn shrink(r: f64, lambda: f64) -> f64 {
    if r > lambda {
        r - lambda
    } else if r < -lambda {
        r + lambda
    } else {
        0.0
    }
}

/// Derivatives at the kink `|r| = lambda` are taken from the clipped branch (0).
pub fn soft_threshold(r: &DVector<f64>, lambda: f64) -> Result<SoftThresholdResult> {
    check_lambda(lambda)?;
    if r.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("denoiser input"));
    }
    let n = r.len();
    let mut value = DVector::zeros(n);
    let mut d_dr = DVector::zeros(n);
    let mut d_dlambda = DVector::zeros(n);
    let mut nnz = 0;
    for j in 0..n {
        let out = shrink(r[j], lambda);
        if out != 0.0 {
            value[j] = out;
            d_dr[j] = 1.0;
            d_dlambda[j] = -r[j].signum();
            nnz += 1;
        }
    }
    Ok(SoftThresholdResult {
        value,
        d_dr,
        d_dlambda,
        nnz,
    })
}

/// Thresholds `values` in place and returns the nonzero count.
pub fn soft_threshold_in_place(values: &mut [f64], lambda: f64) -> usize {
    let mut nnz = 0;
    for v in values.iter_mut() {
        *v = shrink(*v, lambda);
        nnz += (*v != 0.0) as usize;
    }
    nnz
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "threshold must be finite and >= 0, got {lambda}"
        )))
    }
}
