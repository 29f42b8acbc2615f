//! Time-scale generation from a mixed ensemble of cesium clocks and hydrogen
//! masers.
//!
//! The crate models each clock as integrated white noise, stacks the clocks
//! into one linear stochastic system measured only through clock
//! differences, splits that system into its observable part and the
//! unobservable weighted ensemble mean, and runs Kalman filtering and
//! synchronisation control on the observable part. Hadamard-variance tools
//! evaluate and optimise the weighted mean that becomes the time scale.
//!
//! Every numerical type is generic over [`Scalar`] (`f64` or `f32`); the
//! aliases at the bottom of this file fix it to `f64`, which is what the SI
//! noise levels of real clocks require.

pub mod cli;
pub mod clock;
pub mod config;
pub mod control;
pub mod decomposition;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod stability;
#[cfg(test)]
mod testkit;

pub use clock::{ClockKind, ClockSpec, ClockState};
pub use control::ControllerConfig;
pub use decomposition::{DecompositionBundle, WeightVector};
pub use ensemble::{EnsembleSpec, SimulationTrace, SystemMatrices};
pub use error::{Error, Result};
pub use filters::{CkfState, SteadyGains, TkfState};
pub use scalar::Scalar;
pub use stability::{HvarCurve, PsiModel};

pub type ClockSpec64 = ClockSpec<f64>;
pub type EnsembleSpec64 = EnsembleSpec<f64>;
pub type SystemMatrices64 = SystemMatrices<f64>;
pub type WeightVector64 = WeightVector<f64>;
pub type DecompositionBundle64 = DecompositionBundle<f64>;
pub type CkfState64 = CkfState<f64>;
pub type TkfState64 = TkfState<f64>;
pub type SteadyGains64 = SteadyGains<f64>;
pub type ControllerConfig64 = ControllerConfig<f64>;
pub type PsiModel64 = PsiModel<f64>;
pub type SimulationTrace64 = SimulationTrace<f64>;

