//! Small helpers shared between unit tests and the acceptance suite.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::riemann::{BucketLayout, RiemannDistribution};

/// A random distribution with random borders, tail scales and class masses.
pub fn random_riemann(rng: &mut ChaCha8Rng) -> RiemannDistribution {
    let buckets = rng.gen_range(2usize..=40);
    let start = rng.gen_range(-3.0..3.0);
    let mut borders = vec![start];
    for _ in 0..buckets {
        let gap = rng.gen_range(0.01..0.6);
        borders.push(borders.last().unwrap() + gap);
    }
    let scale_left = rng.gen_range(0.05..1.0);
    let scale_right = rng.gen_range(0.05..1.0);
    let layout = BucketLayout::new(borders, scale_left, scale_right).unwrap();

    let mut probs: Vec<f64> = (0..layout.num_classes())
        .map(|_| -rng.gen::<f64>().ln())
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    RiemannDistribution::new(Arc::new(layout), probs).unwrap()
}

/// Mean and standard error of a sample.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
