//! Deterministic, labelled random streams.
//!
//! Every run has one master seed. Each consumer (process noise of clock `i`,
//! measurement noise, ...) reads from its own ChaCha stream selected by a
//! fixed label, so adding a consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub const MEASUREMENT_STREAM: u64 = 1;
pub const PSI_STREAM: u64 = 2;
pub const WHITE_PHASE_STREAM: u64 = 3;
/// Second reference series drawn alongside [`PSI_STREAM`].
pub const PSI_ALT_STREAM: u64 = 4;
const CLOCK_STREAM_BASE: u64 = 0x100;

pub fn clock_stream_label(clock: usize) -> u64 {
    CLOCK_STREAM_BASE + clock as u64
}

pub fn stream(seed: u64, label: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

/// Standard normal draw converted to the scalar type.
pub fn normal<T: Scalar>(rng: &mut ChaCha20Rng) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::lit(x)
}
