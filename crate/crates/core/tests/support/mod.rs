//! Shared helpers for the integration suites: seeded matrix generators and
//! small instance builders.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use r1fm::model::{
    generate_ground_truth, measure, sample_sensing_ensemble, GroundTruth, MeasurementSet,
    SensingEnsemble,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, ncols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random orthonormal r x r matrix (QR of a Gaussian draw).
pub fn random_orthonormal(rng: &mut ChaCha8Rng, r: usize) -> DMatrix<f64> {
    gauss(rng, r, r).qr().q()
}

/// Random symmetric matrix with entries of unit scale.
pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = gauss(rng, n, n);
    (&g + g.transpose()) * 0.5
}

/// A planted instance with unit singular values.
pub fn planted(
    n: usize,
    r: usize,
    m: usize,
    seed: u64,
) -> (GroundTruth, SensingEnsemble, MeasurementSet) {
    let gt = generate_ground_truth(n, r, &vec![1.0; r], seed).unwrap();
    let ens = sample_sensing_ensemble(m, n, seed ^ 0xabcd_ef12).unwrap();
    let y = measure(&gt, &ens).unwrap();
    (gt, ens, y)
}

/// A planted instance with a prescribed spectrum.
pub fn planted_with_sigma(
    n: usize,
    m: usize,
    sigma: &[f64],
    seed: u64,
) -> (GroundTruth, SensingEnsemble, MeasurementSet) {
    let gt = generate_ground_truth(n, sigma.len(), sigma, seed).unwrap();
    let ens = sample_sensing_ensemble(m, n, seed ^ 0xabcd_ef12).unwrap();
    let y = measure(&gt, &ens).unwrap();
    (gt, ens, y)
}
