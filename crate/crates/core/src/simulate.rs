//! Exact GP simulation for synthetic experiments: locations uniform on the
//! unit hypercube, a dense-Cholesky draw of the latent field, and either
//! Gaussian noise or Bernoulli sampling through the logit link.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{Inputs, KernelSpec};
use crate::linalg::chol::parallel_cholesky_in_place;

const MAX_DENSE_N: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimLikelihood {
    Gaussian,
    Bernoulli,
}

impl SimLikelihood {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(Error::InvalidParameter(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Simulated dataset together with the latent field that generated it.
pub struct Simulated {
    pub data: Dataset,
    pub latent: DVector<f64>,
}

pub fn simulate(
    kernel: &KernelSpec,
    n: usize,
    dim: usize,
    likelihood: SimLikelihood,
    seed: u64,
) -> Result<Simulated> {
    if n == 0 || n > MAX_DENSE_N {
        return Err(Error::InvalidParameter(format!(
            "dense simulation supports 1..={} points, got {n}",
            MAX_DENSE_N
        )));
    }
    if kernel.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "simulation kernel",
            expected: dim,
            got: kernel.dim(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let inputs = Inputs::from_fn(n, dim, |_, _| rng.random::<f64>());
    let latent = draw_latent(kernel, &inputs, &mut rng)?;
    let response = match likelihood {
        SimLikelihood::Gaussian => {
            let noise = kernel.nugget.sqrt();
            DVector::from_fn(n, |i, _| {
                latent[i] + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        }
        SimLikelihood::Bernoulli => DVector::from_fn(n, |i, _| {
            let p = 1.0 / (1.0 + (-latent[i]).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }),
    };
    let input_names = (0..dim).map(|j| format!("x{j}")).collect();
    Ok(Simulated { data: Dataset { inputs, response: Some(response), input_names }, latent })
}

/// Exact zero-mean GP draw at the given points via a (blocked, parallel)
/// dense Cholesky of the jittered Gram matrix.
pub fn draw_latent(kernel: &KernelSpec, points: &Inputs, rng: &mut ChaCha20Rng) -> Result<DVector<f64>> {
    let n = points.nrows();
    let mut gram = kernel.cross_cov(points, points)?;
    let jit = kernel.jitter();
    for i in 0..n {
        gram[(i, i)] += jit;
    }
    parallel_cholesky_in_place(&mut gram, "simulation Gram matrix")?;
    let eps = DVector::from_fn(n, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    // gram now holds L; latent = L ε.
    let mut out = DVector::zeros(n);
    for j in 0..n {
        let e = eps[j];
        for i in j..n {
            out[i] += gram[(i, j)] * e;
        }
    }
    Ok(out)
}
