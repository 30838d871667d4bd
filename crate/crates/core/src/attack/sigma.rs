//! Calibration of the initial step size from the probability mass an
//! isotropic Gaussian places outside the normalized search box.

use statrs::function::erf::erf;

use crate::error::{Error, Result};

/// Probability that `N(0, sigma0^2 I)` in `dims` dimensions falls outside
/// the `[-1, 1]^dims` box: `1 - erf(1 / (sigma0 sqrt(2)))^dims`.
pub fn infeasible_mass(sigma0: f64, dims: usize) -> f64 {
    let per_axis = erf(1.0 / (sigma0 * std::f64::consts::SQRT_2));
    1.0 - per_axis.powi(dims as i32)
}

/// Inverts [`infeasible_mass`] in its first argument by bisection: the
/// step size whose initial sampling distribution leaves `epsilon` of its
/// mass outside the box.
pub fn sigma0_solve(epsilon: f64, dims: usize) -> Result<f64> {
    if dims == 0 {
        return Err(Error::Config("need at least one dimension".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "infeasible mass {epsilon} must lie strictly between 0 and 1"
        )));
    }
    // The mass grows monotonically with the step size, from 0 to 1.
    let mut lo = 1e-9;
    let mut hi = 1e9;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if infeasible_mass(mid, dims) < epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma0 = 0.5 * (lo + hi);
    let residual = (infeasible_mass(sigma0, dims) - epsilon).abs();
    if residual >= 1e-10 {
        return Err(Error::Divergence(format!(
            "step-size solve stalled at residual {residual:e}"
        )));
    }
    Ok(sigma0)
}
