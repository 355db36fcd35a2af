//! Uniform random instance generation.
//!
//! Coordinates are i.i.d. uniform on the unit square.  Each instance's
//! stream is keyed by (seed, instance index), so generating a batch of 100
//! and generating instance 57 alone produce the same coordinates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

use super::Instance;

/// Single instance, equivalent to index 0 of a batch under the same seed.
pub fn generate_uniform(n: usize, seed: u64) -> Result<Instance> {
    generate_uniform_indexed(n, seed, 0)
}

/// Instance at a given position within the (seed)-keyed family.
pub fn generate_uniform_indexed(n: usize, seed: u64, index: u64) -> Result<Instance> {
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "generated instances need n >= 4, got {n}"
        )));
    }
    let mut rng = rng_from(&[seed, index, tag::GENERATE]);
    let id = format!("unif{n}-s{seed}-i{index}");
    generate_with_rng(n, &mut rng, id)
}

/// Draw coordinates from an arbitrary caller-owned stream.
pub fn generate_with_rng(n: usize, rng: &mut impl Rng, id: impl Into<String>) -> Result<Instance> {
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    Instance::new(id, coords)
}

/// `count` instances under one seed, indexed 0..count.
pub fn generate_batch(n: usize, seed: u64, count: u64) -> Result<Vec<Instance>> {
    (0..count).map(|i| generate_uniform_indexed(n, seed, i)).collect()
}
