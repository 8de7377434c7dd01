//! Shared fixtures for the criterion benchmarks.

use nalgebra::{DMatrix, DVector};
use pdlds_core::model::ModelParameters;
use pdlds_core::rng::derive_rng;
use rand::Rng;
use rand_distr::StandardNormal;

/// Random well-formed parameters for benchmarking.
pub fn bench_params(n: usize, m: usize, k: usize, seed: u64) -> ModelParameters {
    let mut rng = derive_rng(seed, &[42]);
    let ops = (0..k)
        .map(|_| DMatrix::from_fn(n, n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    ModelParameters::new(
        ops,
        DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        DVector::zeros(m),
        DVector::from_element(m, 0.01),
        DVector::from_element(n, 1e-3),
        DVector::from_element(k, 0.1),
        DVector::zeros(n),
        DVector::from_element(n, 1.0),
    )
    .unwrap()
}

/// A T x M observation block.
pub fn bench_obs(t_len: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = derive_rng(seed, &[43]);
    DMatrix::from_fn(t_len, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}
