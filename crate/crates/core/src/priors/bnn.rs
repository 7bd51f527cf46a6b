//! Bayesian neural network prior: random MLP architectures with tanh
//! activations, sparse Gaussian weights and per-unit activation noise.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_prior_warp, Dataset, DatasetSampler, PriorWarpConfig};
use crate::error::Result;

/// Sampling ranges of the network prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnPriorConfig {
    pub layers: (usize, usize),
    pub hidden_units: (usize, usize),
    pub weight_std: (f64, f64),
    /// Probability that a weight is zeroed; survivors are rescaled by
    /// `1 / sqrt(1 - zero_prob)`.
    pub zero_prob: f64,
    pub pre_activation_noise_std: (f64, f64),
    pub output_noise_std: (f64, f64),
}

impl Default for BnnPriorConfig {
    fn default() -> Self {
        Self {
            layers: (8, 15),
            hidden_units: (36, 150),
            weight_std: (0.089, 0.193),
            zero_prob: 0.145,
            pre_activation_noise_std: (0.0003, 0.0014),
            output_noise_std: (0.0004, 0.0013),
        }
    }
}

impl BnnPriorConfig {
    pub fn rescale_factor(&self) -> f64 {
        1.0 / (1.0 - self.zero_prob).sqrt()
    }

    /// Samples one concrete network.
    pub fn sample_architecture<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> BnnArchitecture {
        let layers = rng.gen_range(self.layers.0..=self.layers.1);
        let hidden = rng.gen_range(self.hidden_units.0..=self.hidden_units.1);
        let weight_std = rng.gen_range(self.weight_std.0..self.weight_std.1);
        let pre_noise = rng
            .gen_range(self.pre_activation_noise_std.0..self.pre_activation_noise_std.1);
        let out_noise = rng.gen_range(self.output_noise_std.0..self.output_noise_std.1);

        let rescale = self.rescale_factor();
        let normal = Normal::new(0.0, weight_std).expect("std > 0");
        let mut dims = Vec::with_capacity(layers + 2);
        dims.push(d);
        dims.extend(std::iter::repeat(hidden).take(layers));
        dims.push(1);

        let weights = dims
            .windows(2)
            .map(|w| {
                let mut m = Array2::zeros((w[0], w[1]));
                for v in m.iter_mut() {
                    if rng.gen::<f64>() >= self.zero_prob {
                        *v = normal.sample(rng) * rescale;
                    }
                }
                m
            })
            .collect();

        BnnArchitecture {
            weights,
            pre_activation_noise_std: pre_noise,
            output_noise_std: out_noise,
        }
    }
}

/// A concrete sampled network (no bias terms, zero-mean function prior).
#[derive(Debug, Clone)]
pub struct BnnArchitecture {
    pub weights: Vec<Array2<f64>>,
    pub pre_activation_noise_std: f64,
    pub output_noise_std: f64,
}

impl BnnArchitecture {
    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    /// Pushes inputs through the network, adding fresh activation noise.
    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, rng: &mut R) -> Array1<f64> {
        let pre = Normal::new(0.0, self.pre_activation_noise_std.max(1e-300)).unwrap();
        let out = Normal::new(0.0, self.output_noise_std.max(1e-300)).unwrap();
        let mut h = x.clone();
        for (li, w) in self.weights.iter().enumerate() {
            let mut z = h.dot(w);
            if li < self.weights.len() - 1 {
                if self.pre_activation_noise_std > 0.0 {
                    for v in z.iter_mut() {
                        *v += pre.sample(rng);
                    }
                }
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        let mut y = h.column(0).to_owned();
        if self.output_noise_std > 0.0 {
            for v in y.iter_mut() {
                *v += out.sample(rng);
            }
        }
        y
    }
}

pub(super) fn sample_with_architecture(
    arch: &BnnArchitecture,
    warp: Option<PriorWarpConfig>,
    n: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut x = Array2::zeros((n, d));
    for v in x.iter_mut() {
        *v = rng.gen::<f64>();
    }
    let mut gen_x = x.clone();
    if let Some(warp) = &warp {
        let params = warp.sample_params(d, rng);
        apply_prior_warp(&mut gen_x, &params);
    }
    let y = arch.forward(&gen_x, rng);
    Dataset::new(x, y.to_vec())
}

pub(super) struct BnnSampler {
    pub cfg: BnnPriorConfig,
    pub warp: Option<PriorWarpConfig>,
}

impl DatasetSampler for BnnSampler {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let arch = self.cfg.sample_architecture(d, rng);
        sample_with_architecture(&arch, self.warp, n, d, rng)
    }
}

/// Draws a dataset from the network prior, one architecture per dataset.
pub fn sample_bnn_prior(
    n: usize,
    d: usize,
    cfg: &BnnPriorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    BnnSampler {
        cfg: cfg.clone(),
        warp: Some(PriorWarpConfig::default()),
    }
    .sample(n, d, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::mean_and_se;
    use rand::SeedableRng;

    #[test]
    fn rescale_factor_value() {
        let cfg = BnnPriorConfig::default();
        // 1 / sqrt(1 - 0.145) evaluated directly.
        assert!((cfg.rescale_factor() - 1.0814761408717501).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_noise_network_is_constant() {
        let arch = BnnArchitecture {
            weights: vec![Array2::zeros((2, 4)), Array2::zeros((4, 1))],
            pre_activation_noise_std: 0.0,
            output_noise_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_vec((3, 2), vec![0.1, 0.9, 0.5, 0.2, 0.7, 0.3]).unwrap();
        let y = arch.forward(&x, &mut rng);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fraction_of_zeroed_weights() {
        let cfg = BnnPriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut flags = Vec::new();
        for _ in 0..30 {
            let arch = cfg.sample_architecture(3, &mut rng);
            for w in &arch.weights {
                for v in w.iter() {
                    flags.push((*v == 0.0) as u8 as f64);
                }
            }
        }
        let (mean, se) = mean_and_se(&flags);
        assert!((mean - 0.145).abs() <= 3.0 * se, "zero fraction {mean}");
    }

    #[test]
    fn sampled_datasets_are_finite_and_in_range() {
        let cfg = BnnPriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = sample_bnn_prior(25, 4, &cfg, &mut rng).unwrap();
        assert_eq!(ds.len(), 25);
        assert!(ds.y.iter().all(|v| v.is_finite()));
    }
}
