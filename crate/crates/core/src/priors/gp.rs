//! Gaussian-process dataset samplers: a fixed-hyperparameter RBF prior and a
//! Matérn prior with hyperpriors over its kernel parameters.

use nalgebra::DVector;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_prior_warp, Dataset, DatasetSampler, PriorWarpConfig};
use crate::error::Result;
use crate::oracle::{chol_with_jitter, HyperPriors, KernelSpec};

/// Fixed RBF hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpleGpConfig {
    pub lengthscale: f64,
    pub outputscale: f64,
    pub noise: f64,
}

impl Default for SimpleGpConfig {
    fn default() -> Self {
        Self {
            lengthscale: 0.2,
            outputscale: 1.0,
            noise: 1e-4,
        }
    }
}

impl SimpleGpConfig {
    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::Rbf {
            lengthscale: self.lengthscale,
            outputscale: self.outputscale,
            noise: self.noise,
        }
    }
}

/// Hyperprior parameters of the Matérn prior. Gamma entries are
/// (concentration, rate); the noise is log-normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeboPriorConfig {
    pub outputscale_gamma: (f64, f64),
    pub lengthscale_gamma: (f64, f64),
    pub log_noise_normal: (f64, f64),
}

impl Default for HeboPriorConfig {
    fn default() -> Self {
        Self {
            outputscale_gamma: (0.8452, 0.3993),
            lengthscale_gamma: (1.2107, 1.5212),
            log_noise_normal: (-4.63, 0.5),
        }
    }
}

impl HeboPriorConfig {
    pub fn hyperpriors(&self) -> HyperPriors {
        HyperPriors {
            outputscale_gamma: self.outputscale_gamma,
            lengthscale_gamma: self.lengthscale_gamma,
            log_noise_normal: self.log_noise_normal,
        }
    }
}

fn uniform_inputs(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x = Array2::zeros((n, d));
    for v in x.iter_mut() {
        *v = rng.gen::<f64>();
    }
    x
}

/// Draws `y ~ N(0, K)` for the kernel evaluated on (possibly warped) inputs.
fn draw_gp_outputs(
    kernel: &KernelSpec,
    x: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let k = kernel.covariance(&rows);
    let chol = chol_with_jitter(&k)?;
    let n = x.nrows();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = DVector::from_iterator(n, (0..n).map(|_| normal.sample(rng)));
    let y = chol.l_dirty().lower_triangle() * z;
    Ok(y.iter().copied().collect())
}

pub(super) struct SimpleGpSampler {
    pub cfg: SimpleGpConfig,
    pub warp: Option<PriorWarpConfig>,
}

impl DatasetSampler for SimpleGpSampler {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let x = uniform_inputs(n, d, rng);
        let mut gen_x = x.clone();
        if let Some(warp) = &self.warp {
            let params = warp.sample_params(d, rng);
            apply_prior_warp(&mut gen_x, &params);
        }
        let y = draw_gp_outputs(&self.cfg.kernel(), &gen_x, rng)?;
        Dataset::new(x, y)
    }
}

pub(super) struct HeboSampler {
    pub cfg: HeboPriorConfig,
    pub warp: Option<PriorWarpConfig>,
}

impl DatasetSampler for HeboSampler {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let kernel = self.cfg.hyperpriors().sample_kernel(d, rng);
        let x = uniform_inputs(n, d, rng);
        let mut gen_x = x.clone();
        if let Some(warp) = &self.warp {
            let params = warp.sample_params(d, rng);
            apply_prior_warp(&mut gen_x, &params);
        }
        let y = draw_gp_outputs(&kernel, &gen_x, rng)?;
        Dataset::new(x, y)
    }
}

/// Draws a dataset from the fixed-hyperparameter RBF prior.
pub fn sample_simple_gp(
    n: usize,
    d: usize,
    cfg: &SimpleGpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    SimpleGpSampler { cfg: *cfg, warp: None }.sample(n, d, rng)
}

/// Draws a dataset from the Matérn prior with per-dataset hyperparameters.
pub fn sample_hebo_prior(
    n: usize,
    d: usize,
    cfg: &HeboPriorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    HeboSampler {
        cfg: cfg.clone(),
        warp: None,
    }
    .sample(n, d, rng)
}
