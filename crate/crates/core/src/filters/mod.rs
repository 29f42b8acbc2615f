//! Kalman filters over the ensemble.
//!
//! [`ckf`] runs on the full, undetectable model and its covariance grows
//! without bound. [`tkf`] runs in decomposition coordinates and only
//! propagates the covariance blocks that stay bounded. [`steady`] computes
//! the limiting gains so the filter can run mean-only.

pub mod ckf;
pub mod steady;
pub mod tkf;

pub use ckf::{CkfState, CkfUpdateForm};
pub use steady::{
    solve_cross_covariance, solve_riccati, sstkf_step, steady_gains, CrossCovarianceMethod, RiccatiMethod,
    RiccatiOptions, SteadyGains,
};
pub use tkf::{TkfMean, TkfState};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg;
use crate::scalar::Scalar;

/// `(C P Cᵀ + rI)⁻¹`, the inverse innovation covariance.
pub(crate) fn innovation_inverse<T: Scalar>(c: &DMatrix<T>, p_prior: &DMatrix<T>, r: T) -> Result<DMatrix<T>> {
    let mut s = c * p_prior * c.transpose();
    for i in 0..s.nrows() {
        s[(i, i)] += r;
    }
    linalg::symmetrize(&mut s);
    linalg::spd_inverse("innovation covariance", &s)
}
