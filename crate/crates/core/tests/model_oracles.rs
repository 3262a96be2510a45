//! Statistical oracles for the measurement model: moment sanity checks on
//! the Gaussian sampler, concentration of the empirical second moment,
//! streaming-sketch convergence, and invariances of the quadratic channel.

mod support;

use nalgebra::DMatrix;
use proptest::prelude::*;
use r1fm::kernels::SymmetricMatrix;
use r1fm::model::{
    covariance_sketch, generate_ground_truth, measure, measure_factor, read_ensemble,
    read_measurements, sample_covariance_stream, sample_sensing_ensemble, singular_values_of,
    write_ensemble, write_measurements,
};
use support::{planted_with_sigma, random_orthonormal, rng};

#[test]
fn sampler_moments_on_scalar_draws() {
    let ens = sample_sensing_ensemble(10_000, 1, 51_001).unwrap();
    let values: Vec<f64> = (0..ens.m()).map(|i| ens.vector(i)[0]).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    assert!(mean.abs() <= 0.05, "sample mean {mean}");
    assert!((0.95..=1.05).contains(&var), "sample variance {var}");
}

#[test]
fn empirical_second_moment_concentrates_to_identity() {
    let n = 8;
    let m = 10_000;
    let ens = sample_sensing_ensemble(m, n, 51_002).unwrap();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..m {
        let a = ens.vector(i);
        s.ger(1.0 / m as f64, &a, &a, 1.0);
    }
    let diff = SymmetricMatrix::new(s - DMatrix::identity(n, n)).unwrap();
    let dev = diff.spectral_norm().unwrap();
    assert!(dev <= 0.2, "spectral deviation {dev}");
}

#[test]
fn projected_energy_matches_norm() {
    // E[(a^T x)^2] = ||x||^2 for fresh Gaussian a, within 5% at 1e5 draws.
    let x = vec![0.8, -0.5, 1.2, 0.1];
    let m = 100_000;
    let ens = sample_sensing_ensemble(m, 4, 51_003).unwrap();
    let mut acc = 0.0;
    for i in 0..m {
        let dot: f64 = ens.vector(i).iter().zip(&x).map(|(a, b)| a * b).sum();
        acc += dot * dot;
    }
    acc /= m as f64;
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    assert!(
        (acc - norm_sq).abs() <= 0.05 * norm_sq,
        "empirical {acc} vs {norm_sq}"
    );
}

#[test]
fn measurement_invariant_under_right_orthonormal_transform() {
    let mut rng = rng(51_004);
    let (gt, ens, y) = planted_with_sigma(6, 30, &[1.4, 0.9], 51_104);
    let p = random_orthonormal(&mut rng, 2);
    let rotated = gt.factor() * p;
    let y_rot = measure_factor(&rotated, &ens).unwrap();
    for (a, b) in y.values().iter().zip(y_rot.values()) {
        assert!(
            (a - b).abs() <= 1e-12 * a.abs().max(1e-300),
            "measurement changed under rotation: {a} vs {b}"
        );
    }
}

#[test]
fn ground_truth_spectrum_roundtrips_through_svd() {
    for trial in 0..10 {
        let sigma = [2.0, 1.3, 0.4];
        let gt = generate_ground_truth(7, 3, &sigma, 51_200 + trial).unwrap();
        let recomputed = singular_values_of(gt.factor()).unwrap();
        for (want, got) in sigma.iter().zip(&recomputed) {
            assert!((want - got).abs() <= 1e-9, "sigma {want} vs {got}");
        }
        let kappa = (sigma[0] / sigma[2]).powi(2);
        assert!((gt.kappa() - kappa).abs() <= 1e-10);
    }
}

#[test]
fn sketch_converges_to_exact_measurements() {
    let (gt, ens, y_exact) = planted_with_sigma(8, 40, &[1.2, 0.8], 51_005);
    let stream = sample_covariance_stream(&gt, 100_000, 51_305);
    let y_sketch = covariance_sketch(&stream, &ens).unwrap();

    let max_exact = y_exact
        .values()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let max_gap = y_exact
        .values()
        .iter()
        .zip(y_sketch.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    assert!(
        max_gap / max_exact <= 0.1,
        "sketch error {max_gap} vs scale {max_exact}"
    );
}

#[test]
fn sketch_error_shrinks_with_stream_length() {
    // Majority vote over 3 seeds: the 1e5-sample sketch beats the 1e3 one.
    let mut wins = 0;
    for seed in [1_u64, 2, 3] {
        let (gt, ens, y_exact) = planted_with_sigma(6, 30, &[1.0, 0.6], 52_000 + seed);
        let err = |len: usize, s: u64| {
            let stream = sample_covariance_stream(&gt, len, s);
            let y = covariance_sketch(&stream, &ens).unwrap();
            y.values()
                .iter()
                .zip(y_exact.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max)
        };
        let small = err(1_000, 52_100 + seed);
        let large = err(100_000, 52_200 + seed);
        if large < small {
            wins += 1;
        }
    }
    assert!(wins >= 2, "sketch error shrank on only {wins}/3 seeds");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn measurements_nonnegative_and_roundtrip(
        seed in 0u64..1_000_000,
        n in 2usize..6,
        m in 1usize..12,
    ) {
        let r = 1 + (seed as usize) % n.min(3);
        let gt = generate_ground_truth(n, r, &vec![1.0; r], seed).unwrap();
        let ens = sample_sensing_ensemble(m, n, seed ^ 0x77).unwrap();
        let y = measure(&gt, &ens).unwrap();
        prop_assert!(y.values().iter().all(|v| *v >= 0.0));

        let mut ebuf = Vec::new();
        write_ensemble(&mut ebuf, &ens).unwrap();
        let ens_back = read_ensemble(&mut &ebuf[..]).unwrap();
        prop_assert_eq!(ens_back.vectors(), ens.vectors());
        prop_assert_eq!(ens_back.fingerprint(), ens.fingerprint());

        let mut ybuf = Vec::new();
        write_measurements(&mut ybuf, &y, &ens).unwrap();
        let y_back = read_measurements(&mut &ybuf[..]).unwrap();
        prop_assert_eq!(y_back.values(), y.values());
        y_back.check_bound_to(&ens_back).unwrap();
    }
}
