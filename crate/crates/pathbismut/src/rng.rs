//! Per-particle random streams.
//!
//! Every particle owns two ChaCha8 streams keyed by `(seed, particle)`: one
//! for its Brownian increments, drawn step by step in order, and one for its
//! initial segment. Draws never depend on how particles are scheduled across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type ParticleRng = ChaCha8Rng;

pub fn noise_stream(seed: u64, particle: usize) -> ParticleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * particle as u64);
    rng
}

pub fn initial_stream(seed: u64, particle: usize) -> ParticleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * particle as u64 + 1);
    rng
}

pub fn fill_normal(rng: &mut ParticleRng, out: &mut [f64], scale: f64) {
    for v in out {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}
