//! Shared helpers for the integration tests.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use decoloco::estimators::FoldEstimate;

pub fn normal_draws(n: usize, seed: u64, sd: f64) -> DVector<f64> {
    let mut r = decoloco::rng::stream(seed, "test-normal", 0);
    DVector::from_fn(n, |_, _| {
        sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
    })
}

pub fn uniform_draws(n: usize, seed: u64) -> DVector<f64> {
    let mut r = decoloco::rng::stream(seed, "test-uniform", 0);
    DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0))
}

pub fn pooled(folds: &[FoldEstimate]) -> f64 {
    folds.iter().map(|f| f.value).sum::<f64>() / folds.len() as f64
}
