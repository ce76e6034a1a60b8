//! Deterministic substream derivation for reproducible parallel sampling.
//!
//! Every random draw in this crate comes from a stream keyed by
//! `(seed, trajectory index, slot)`, so trajectories are independent and can
//! be generated in parallel (or resumed) with results identical to sequential
//! execution. Slot [`PARAM_SLOT`] carries per-trajectory parameter draws
//! (weight vectors, persistent offsets); slot `step_slot(k)` carries the
//! disturbance draws of step `k`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Slot reserved for per-trajectory parameter draws.
pub const PARAM_SLOT: u64 = 0;

/// Slot carrying the step-`k` disturbance draws.
pub fn step_slot(step: usize) -> u64 {
    step as u64 + 1
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for the given `(seed, trajectory, slot)` triple.
pub fn substream(seed: u64, trajectory: u64, slot: u64) -> ChaCha8Rng {
    let mut s = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    s = splitmix64(s ^ trajectory);
    s = splitmix64(s ^ slot);
    let mut key = [0u8; 32];
    let mut acc = s;
    for chunk in key.chunks_exact_mut(8) {
        acc = splitmix64(acc);
        chunk.copy_from_slice(&acc.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// `len` i.i.d. standard normal draws from `rng`, in draw order.
pub fn standard_normals<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}
