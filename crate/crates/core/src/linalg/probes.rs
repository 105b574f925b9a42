//! Probe-vector sampling for stochastic estimators.

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::pcg::Preconditioner;

pub fn standard_normal(n: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// RNG for the `index`-th stochastic stream of a master seed.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw `count` i.i.d. probe vectors from `N(0, P)`, reproducibly under a
/// fixed seed. Probe `i` uses its own RNG stream so probes can be consumed
/// in parallel without changing the draws.
pub fn draw_probe_vectors<P: Preconditioner + ?Sized>(
    pre: &P,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            pre.draw_sample(&mut rng)
        })
        .collect()
}
