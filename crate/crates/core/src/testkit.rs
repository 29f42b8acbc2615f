//! Shared fixtures for unit tests.

use crate::clock::ClockSpec;
use crate::decomposition::{build_transform, DecompositionBundle, ReducedNoise, WeightVector};
use crate::ensemble::{assemble_system, EnsembleSpec, SystemMatrices};

/// Two cesium clocks and one maser whose drift noise is large enough that
/// the filter settles within a few thousand steps.
pub fn small_spec(r: f64) -> EnsembleSpec<f64> {
    EnsembleSpec::with_default_v(
        vec![
            ClockSpec::cs(0.17e-9, 1.3e-12).unwrap(),
            ClockSpec::cs(0.09e-9, 1.0e-12).unwrap(),
            ClockSpec::hm(0.02e-9, 0.4e-12, 1.0e-14).unwrap(),
        ],
        1.0,
        r,
    )
    .unwrap()
}

pub fn small_setup(r: f64) -> (EnsembleSpec<f64>, SystemMatrices<f64>, DecompositionBundle<f64>, ReducedNoise<f64>) {
    let spec = small_spec(r);
    let sys = assemble_system(&spec).unwrap();
    let bundle = build_transform(&spec, &WeightVector::from_slice(&[0.2, 0.3, 0.5]).unwrap()).unwrap();
    let noise = bundle.reduced_noise(&sys.q);
    (spec, sys, bundle, noise)
}
