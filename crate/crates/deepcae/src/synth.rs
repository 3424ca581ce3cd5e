//! Deterministic synthetic datasets.
//!
//! Small generators used by the examples, the tests, and the
//! built-in model comparisons. Every generator is a pure function of
//! its seed, draws in a fixed row-major order, and emits features
//! already scaled to the tanh-friendly range [-1, 1], so the data can
//! feed an autoencoder without further preprocessing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Matrix;

/// A generated train/test pair with a downstream prediction target.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub name: String,
    pub train: Matrix,
    pub test: Matrix,
    /// Class index (as f64) for classification data, real value for
    /// regression data.
    pub train_target: Vec<f64>,
    pub test_target: Vec<f64>,
    pub classification: bool,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("std is positive").sample(rng)
}

/// Gaussian class clusters with clamped coordinates. Classes are
/// assigned round-robin so any contiguous slice stays balanced.
pub fn blobs(
    seed: u64,
    n_train: usize,
    n_test: usize,
    dim: usize,
    classes: usize,
) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-0.55..0.55)).collect())
        .collect();
    let mut draw = |n: usize| {
        let mut data = Vec::with_capacity(n * dim);
        let mut target = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            for center in centers[c].iter().take(dim) {
                let v = center + normal(&mut rng, 0.18);
                data.push(v.clamp(-1.0, 1.0));
            }
            target.push(c as f64);
        }
        (Matrix::new(n, dim, data).expect("finite by construction"), target)
    };
    let (train, train_target) = draw(n_train);
    let (test, test_target) = draw(n_test);
    SynthDataset {
        name: format!("blobs{}d{}c", dim, classes),
        train,
        test,
        train_target,
        test_target,
        classification: true,
    }
}

/// Points on a smooth low-dimensional manifold embedded by random
/// sinusoids, with light observation noise. The regression target is
/// the first latent coordinate.
pub fn curved_manifold(
    seed: u64,
    n_train: usize,
    n_test: usize,
    dim: usize,
    intrinsic: usize,
) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing: Vec<Vec<f64>> = (0..intrinsic)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let phase: Vec<f64> = (0..dim)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let freq: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.8..1.6)).collect();

    let mut draw = |n: usize| {
        let mut data = Vec::with_capacity(n * dim);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let latent: Vec<f64> = (0..intrinsic).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for j in 0..dim {
                let drive: f64 = (0..intrinsic).map(|t| latent[t] * mixing[t][j]).sum();
                let v = 0.9 * (freq[j] * drive + phase[j]).sin() + normal(&mut rng, 0.02);
                data.push(v.clamp(-1.0, 1.0));
            }
            target.push(latent[0]);
        }
        (Matrix::new(n, dim, data).expect("finite by construction"), target)
    };
    let (train, train_target) = draw(n_train);
    let (test, test_target) = draw(n_test);
    SynthDataset {
        name: format!("manifold{}d{}i", dim, intrinsic),
        train,
        test,
        train_target,
        test_target,
        classification: false,
    }
}

/// Tabular-style mixture: a few informative Gaussian columns per
/// class, a block of discrete-looking columns tied to the class with
/// occasional flips, and pure-noise columns.
pub fn tabular_mix(
    seed: u64,
    n_train: usize,
    n_test: usize,
    informative: usize,
    noisy: usize,
) -> SynthDataset {
    const CLASSES: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..CLASSES)
        .map(|_| (0..informative).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let dim = informative + CLASSES + noisy;

    let mut draw = |n: usize| {
        let mut data = Vec::with_capacity(n * dim);
        let mut target = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % CLASSES;
            for center in centers[c].iter().take(informative) {
                let v = center + normal(&mut rng, 0.2);
                data.push(v.clamp(-1.0, 1.0));
            }
            for k in 0..CLASSES {
                let flip = rng.gen_bool(0.1);
                let on = (k == c) != flip;
                data.push(if on { 0.8 } else { -0.8 });
            }
            for _ in 0..noisy {
                data.push(rng.gen_range(-1.0..1.0));
            }
            target.push(c as f64);
        }
        (Matrix::new(n, dim, data).expect("finite by construction"), target)
    };
    let (train, train_target) = draw(n_train);
    let (test, test_target) = draw(n_test);
    SynthDataset {
        name: format!("tabular{}d", dim),
        train,
        test,
        train_target,
        test_target,
        classification: true,
    }
}

/// Correlated, tanh-squashed Gaussian features with no target; used
/// for unsupervised diagnostics.
pub fn correlated_gaussian(seed: u64, n: usize, dim: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    if i == j {
                        0.8
                    } else {
                        rng.gen_range(-0.5..0.5)
                    }
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let z: Vec<f64> = (0..dim).map(|_| normal(&mut rng, 1.0)).collect();
        for col in 0..dim {
            let mixed: f64 = z.iter().zip(&mixing).map(|(zr, row)| zr * row[col]).sum();
            data.push((0.6 * mixed).tanh());
        }
    }
    Matrix::new(n, dim, data).expect("finite by construction")
}

/// Every row identical; handy for convergence sanity checks.
pub fn constant_rows(n: usize, dim: usize, value: f64) -> Matrix {
    Matrix::filled(n, dim, value)
}

/// The three small benchmarks used for built-in model comparisons:
/// deliberately modest training sets with larger test sets, so
/// regularization has something to earn.
pub fn comparison_suite(seed: u64) -> Vec<SynthDataset> {
    vec![
        blobs(seed, 60, 360, 12, 4),
        curved_manifold(seed.wrapping_add(1), 60, 360, 14, 3),
        tabular_mix(seed.wrapping_add(2), 60, 360, 6, 4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let a = blobs(5, 30, 20, 6, 3);
        let b = blobs(5, 30, 20, 6, 3);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train_target, b.train_target);
        let c = blobs(6, 30, 20, 6, 3);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn features_lie_in_tanh_range() {
        for ds in comparison_suite(11) {
            for m in [&ds.train, &ds.test] {
                assert!(m.data().iter().all(|v| (-1.0..=1.0).contains(v)), "{}", ds.name);
            }
        }
        let g = correlated_gaussian(3, 50, 8);
        assert!(g.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn shapes_and_targets_line_up() {
        let ds = tabular_mix(9, 33, 44, 5, 2);
        assert_eq!(ds.train.rows(), 33);
        assert_eq!(ds.test.rows(), 44);
        assert_eq!(ds.train.cols(), 5 + 3 + 2);
        assert_eq!(ds.train_target.len(), 33);
        assert_eq!(ds.test_target.len(), 44);
        assert!(ds.classification);

        let reg = curved_manifold(9, 20, 10, 7, 2);
        assert!(!reg.classification);
        assert!(reg.train_target.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn classes_are_balanced() {
        let ds = blobs(13, 30, 30, 5, 3);
        for c in 0..3 {
            let count = ds.train_target.iter().filter(|&&t| t == c as f64).count();
            assert_eq!(count, 10);
        }
    }
}
