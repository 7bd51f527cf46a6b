//! Exact Gaussian-process machinery: closed-form posteriors and expected
//! improvement for fixed-hyperparameter kernels, plus a MAP-fitted Matérn
//! model that serves as the empirical-Bayes comparator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Covariance function plus observation-noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Isotropic squared-exponential, `outputscale * exp(-r^2 / (2 l^2))`.
    Rbf {
        lengthscale: f64,
        outputscale: f64,
        noise: f64,
    },
    /// Matérn 3/2 with one lengthscale per input dimension,
    /// `outputscale * (1 + sqrt(3) r) * exp(-sqrt(3) r)`.
    Matern32Ard {
        lengthscales: Vec<f64>,
        outputscale: f64,
        noise: f64,
    },
}

impl KernelSpec {
    /// Fixed-hyperparameter squared-exponential defaults used for validation
    /// tasks on the unit interval.
    pub fn default_rbf() -> Self {
        KernelSpec::Rbf {
            lengthscale: 0.2,
            outputscale: 1.0,
            noise: 1e-4,
        }
    }

    pub fn noise(&self) -> f64 {
        match self {
            KernelSpec::Rbf { noise, .. } => *noise,
            KernelSpec::Matern32Ard { noise, .. } => *noise,
        }
    }

    pub fn outputscale(&self) -> f64 {
        match self {
            KernelSpec::Rbf { outputscale, .. } => *outputscale,
            KernelSpec::Matern32Ard { outputscale, .. } => *outputscale,
        }
    }

    /// Covariance between two points, excluding the noise term.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelSpec::Rbf {
                lengthscale,
                outputscale,
                ..
            } => {
                let r2: f64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                outputscale * (-r2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            KernelSpec::Matern32Ard {
                lengthscales,
                outputscale,
                ..
            } => {
                let r2: f64 = a
                    .iter()
                    .zip(b.iter())
                    .zip(lengthscales.iter())
                    .map(|((x, y), l)| {
                        let d = (x - y) / l;
                        d * d
                    })
                    .sum();
                let u = (3.0 * r2).sqrt();
                outputscale * (1.0 + u) * (-u).exp()
            }
        }
    }

    /// Full covariance matrix with the noise variance on the diagonal.
    pub fn covariance(&self, x: &[Vec<f64>]) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&x[i], &x[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        for i in 0..n {
            k[(i, i)] += self.noise();
        }
        k
    }
}

/// Cholesky factorization with escalating diagonal jitter. Starts at
/// `1e-10 * trace / n` and multiplies by ten up to `1e-4 * trace / n`.
pub fn chol_with_jitter(k: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = k.nrows();
    if let Some(ch) = Cholesky::new(k.clone()) {
        return Ok(ch);
    }
    let base = k.trace().abs().max(1e-300) / n as f64;
    let mut jitter = 1e-10 * base;
    let max_jitter = 1e-4 * base;
    while jitter <= max_jitter {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(kj) {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky { max_jitter })
}

/// Exact GP posterior over a fixed training set.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: KernelSpec,
    x: Vec<Vec<f64>>,
    y: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpPosterior {
    pub fn fit(kernel: KernelSpec, x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Domain("empty or mismatched training data".into()));
        }
        let k = kernel.covariance(x);
        let chol = chol_with_jitter(&k)?;
        let y = DVector::from_column_slice(y);
        let alpha = chol.solve(&y);
        Ok(Self {
            kernel,
            x: x.to_vec(),
            y,
            chol,
            alpha,
        })
    }

    pub fn from_dataset(kernel: KernelSpec, x: ArrayView2<'_, f64>, y: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        Self::fit(kernel, &rows, y)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn train_len(&self) -> usize {
        self.x.len()
    }

    /// Posterior mean and variance of the latent function at a query point.
    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut k_star = DVector::zeros(n);
        for i in 0..n {
            k_star[i] = self.kernel.eval(&self.x[i], query);
        }
        let mean = k_star.dot(&self.alpha);
        let v = self.chol.solve(&k_star);
        let var = self.kernel.eval(query, query) - k_star.dot(&v);
        (mean, var.max(0.0))
    }

    /// Log marginal likelihood of the training outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len() as f64;
        let data_fit = -0.5 * self.y.dot(&self.alpha);
        let log_det: f64 = self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
            * 2.0;
        data_fit - 0.5 * log_det - 0.5 * n * LN_2PI
    }
}

/// Closed-form Gaussian expected improvement.
///
/// With zero variance this degenerates to `max(mean - f_star, 0)`.
pub fn gaussian_ei(mean: f64, variance: f64, f_star: f64) -> f64 {
    if variance <= 0.0 {
        return (mean - f_star).max(0.0);
    }
    let sigma = variance.sqrt();
    let z = (mean - f_star) / sigma;
    (sigma * (z * normal_cdf(z) + normal_pdf(z))).max(0.0)
}

/// Hyperpriors for the MAP Matérn fit. Gamma distributions are given as
/// (concentration, rate); the noise prior is normal on the log variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperPriors {
    pub outputscale_gamma: (f64, f64),
    pub lengthscale_gamma: (f64, f64),
    pub log_noise_normal: (f64, f64),
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            outputscale_gamma: (0.8452, 0.3993),
            lengthscale_gamma: (1.2107, 1.5212),
            log_noise_normal: (-4.63, 0.5),
        }
    }
}

impl HyperPriors {
    pub fn sample_kernel<R: Rng + ?Sized>(&self, dims: usize, rng: &mut R) -> KernelSpec {
        let out_gamma = Gamma::new(self.outputscale_gamma.0, 1.0 / self.outputscale_gamma.1)
            .expect("gamma params");
        let len_gamma = Gamma::new(self.lengthscale_gamma.0, 1.0 / self.lengthscale_gamma.1)
            .expect("gamma params");
        let noise_normal =
            Normal::new(self.log_noise_normal.0, self.log_noise_normal.1).expect("normal params");
        let outputscale: f64 = out_gamma.sample(rng);
        let lengthscales: Vec<f64> = (0..dims).map(|_| len_gamma.sample(rng)).collect();
        let noise = noise_normal.sample(rng).exp();
        KernelSpec::Matern32Ard {
            lengthscales: lengthscales.iter().map(|l| l.max(1e-4)).collect(),
            outputscale: outputscale.max(1e-6),
            noise,
        }
    }

    fn log_density(&self, log_ls: &[f64], log_os: f64, log_noise: f64) -> f64 {
        let (a_o, r_o) = self.outputscale_gamma;
        let (a_l, r_l) = self.lengthscale_gamma;
        let (mu, sd) = self.log_noise_normal;
        let mut lp = (a_o - 1.0) * log_os - r_o * log_os.exp();
        for l in log_ls {
            lp += (a_l - 1.0) * l - r_l * l.exp();
        }
        lp += -0.5 * ((log_noise - mu) / sd).powi(2);
        lp
    }

    /// Gradient of the log hyperprior density in log-parameter space, in the
    /// order (lengthscales.., outputscale, noise). Includes the Jacobian of
    /// the log reparameterization for the Gamma terms.
    fn log_density_grad(&self, log_ls: &[f64], log_os: f64, log_noise: f64) -> Vec<f64> {
        let (a_o, r_o) = self.outputscale_gamma;
        let (a_l, r_l) = self.lengthscale_gamma;
        let (mu, sd) = self.log_noise_normal;
        let mut g = Vec::with_capacity(log_ls.len() + 2);
        for l in log_ls {
            g.push((a_l - 1.0) - r_l * l.exp());
        }
        g.push((a_o - 1.0) - r_o * log_os.exp());
        g.push(-(log_noise - mu) / (sd * sd));
        g
    }
}

/// Settings for the MAP hyperparameter search.
#[derive(Debug, Clone)]
pub struct MapFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for MapFitConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            steps: 200,
            step_size: 0.05,
        }
    }
}

struct MapObjective<'a> {
    x: &'a [Vec<f64>],
    y: DVector<f64>,
    priors: &'a HyperPriors,
    dims: usize,
}

impl MapObjective<'_> {
    /// Returns the penalized log marginal likelihood and its gradient with
    /// respect to (log lengthscales.., log outputscale, log noise).
    fn value_and_grad(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let d = self.dims;
        let log_ls = &theta[..d];
        let log_os = theta[d];
        let log_noise = theta[d + 1];
        let lengthscales: Vec<f64> = log_ls.iter().map(|l| l.exp()).collect();
        let outputscale = log_os.exp();
        let noise = log_noise.exp();
        let n = self.x.len();

        let kernel = KernelSpec::Matern32Ard {
            lengthscales: lengthscales.clone(),
            outputscale,
            noise,
        };
        let k = kernel.covariance(self.x);
        let chol = chol_with_jitter(&k).ok()?;
        let alpha = chol.solve(&self.y);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * self.y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;
        let value = lml + self.priors.log_density(log_ls, log_os, log_noise);
        if !value.is_finite() {
            return None;
        }

        // W = alpha alpha^T - K^{-1}; d lml / d theta = 0.5 tr(W dK/d theta).
        let k_inv = chol.inverse();
        let mut grad = self.priors.log_density_grad(log_ls, log_os, log_noise);
        let sqrt3 = 3.0f64.sqrt();
        for i in 0..n {
            for j in 0..n {
                let w = alpha[i] * alpha[j] - k_inv[(i, j)];
                let mut r2 = 0.0;
                for (q, l) in lengthscales.iter().enumerate() {
                    let diff = (self.x[i][q] - self.x[j][q]) / l;
                    r2 += diff * diff;
                }
                let r = r2.sqrt();
                let decay = (-sqrt3 * r).exp();
                // d/d log l_q of the Matérn term.
                for (q, l) in lengthscales.iter().enumerate() {
                    let diff = self.x[i][q] - self.x[j][q];
                    let dk = outputscale * 3.0 * decay * diff * diff / (l * l);
                    grad[q] += 0.5 * w * dk;
                }
                // d/d log outputscale.
                grad[d] += 0.5 * w * outputscale * (1.0 + sqrt3 * r) * decay;
                // d/d log noise (diagonal only).
                if i == j {
                    grad[d + 1] += 0.5 * w * noise;
                }
            }
        }
        Some((value, grad))
    }
}

/// Maximum-a-posteriori fit of the Matérn kernel under the given hyperpriors,
/// by multi-restart Adam ascent in log-parameter space.
pub fn fit_map<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[f64],
    priors: &HyperPriors,
    cfg: &MapFitConfig,
    rng: &mut R,
) -> Result<KernelSpec> {
    if x.len() < 2 {
        return Err(Error::Domain("need at least 2 observations".into()));
    }
    let dims = x[0].len();
    let objective = MapObjective {
        x,
        y: DVector::from_column_slice(y),
        priors,
        dims,
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..cfg.restarts {
        let mut theta: Vec<f64> = if restart == 0 {
            // One deterministic start at the hyperprior means.
            let mut t = vec![(priors.lengthscale_gamma.0 / priors.lengthscale_gamma.1).ln(); dims];
            t.push((priors.outputscale_gamma.0 / priors.outputscale_gamma.1).ln());
            t.push(priors.log_noise_normal.0);
            t
        } else {
            match priors.sample_kernel(dims, rng) {
                KernelSpec::Matern32Ard {
                    lengthscales,
                    outputscale,
                    noise,
                } => {
                    let mut t: Vec<f64> = lengthscales.iter().map(|l| l.ln()).collect();
                    t.push(outputscale.ln());
                    t.push(noise.ln());
                    t
                }
                _ => unreachable!(),
            }
        };

        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        let mut last_value = f64::NEG_INFINITY;
        for step in 0..cfg.steps {
            let Some((value, grad)) = objective.value_and_grad(&theta) else {
                break;
            };
            last_value = value;
            let t = (step + 1) as f64;
            for (i, g) in grad.iter().enumerate() {
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let m_hat = m[i] / (1.0 - 0.9f64.powf(t));
                let v_hat = v[i] / (1.0 - 0.999f64.powf(t));
                theta[i] += cfg.step_size * m_hat / (v_hat.sqrt() + 1e-8);
                theta[i] = theta[i].clamp(-12.0, 6.0);
            }
        }
        if let Some((value, _)) = objective.value_and_grad(&theta) {
            last_value = value;
        }
        if last_value.is_finite() && best.as_ref().is_none_or(|(b, _)| last_value > *b) {
            best = Some((last_value, theta));
        }
    }

    let (_, theta) = best.ok_or_else(|| Error::FitFailed("all restarts failed".into()))?;
    Ok(KernelSpec::Matern32Ard {
        lengthscales: theta[..dims].iter().map(|t| t.exp()).collect(),
        outputscale: theta[dims].exp(),
        noise: theta[dims + 1].exp(),
    })
}

/// A lazily materialized draw from a GP prior: each new query is sampled from
/// the posterior conditioned on all previously answered queries, which makes
/// the whole history one consistent function sample.
pub struct GpFunctionSampler {
    kernel: KernelSpec,
    rng: rand_chacha::ChaCha8Rng,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

impl GpFunctionSampler {
    pub fn new(kernel: KernelSpec, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            kernel,
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn eval(&mut self, x: &[f64]) -> Result<f64> {
        if let Some(i) = self.xs.iter().position(|p| p == x) {
            return Ok(self.ys[i]);
        }
        let (mean, var) = if self.xs.is_empty() {
            (0.0, self.kernel.eval(x, x))
        } else {
            let gp = GpPosterior::fit(self.kernel.clone(), &self.xs, &self.ys)?;
            gp.predict(x)
        };
        let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut self.rng);
        let y = mean + var.max(0.0).sqrt() * z;
        self.xs.push(x.to_vec());
        self.ys.push(y);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_gp(noise: f64) -> GpPosterior {
        let kernel = KernelSpec::Rbf {
            lengthscale: 0.2,
            outputscale: 1.0,
            noise,
        };
        let x = vec![vec![0.1], vec![0.4], vec![0.75]];
        let y = vec![0.3, -0.6, 1.1];
        GpPosterior::fit(kernel, &x, &y).unwrap()
    }

    #[test]
    fn posterior_reverts_to_prior_far_away() {
        let gp = toy_gp(1e-8);
        let (mean, var) = gp.predict(&[250.0]);
        assert!(mean.abs() < 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn posterior_interpolates_at_zero_noise() {
        let gp = toy_gp(0.0);
        let (mean, var) = gp.predict(&[0.4]);
        assert!((mean + 0.6).abs() < 1e-5, "mean {mean}");
        assert!(var < 1e-5, "var {var}");
    }

    /// Naive Gauss-Jordan inverse, independent of the Cholesky path.
    fn invert_direct(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut aug = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if aug[(r, col)].abs() > aug[(pivot, col)].abs() {
                    pivot = r;
                }
            }
            aug.swap_rows(col, pivot);
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        let mut inv = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn posterior_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let d = rng.gen_range(1..4);
            let x: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let kernel = KernelSpec::Rbf {
                lengthscale: 0.3,
                outputscale: 1.5,
                noise: 1e-3,
            };
            let gp = GpPosterior::fit(kernel.clone(), &x, &y).unwrap();

            let k_inv = invert_direct(&kernel.covariance(&x));
            let q: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            let mut k_star = DVector::zeros(n);
            for i in 0..n {
                k_star[i] = kernel.eval(&x[i], &q);
            }
            let yv = DVector::from_column_slice(&y);
            let mean_direct = k_star.dot(&(&k_inv * &yv));
            let var_direct = kernel.eval(&q, &q) - k_star.dot(&(&k_inv * &k_star));

            let (mean, var) = gp.predict(&q);
            assert!((mean - mean_direct).abs() < 1e-8);
            assert!((var - var_direct).abs() < 1e-8);
        }
    }

    #[test]
    fn log_marginal_likelihood_matches_direct_inverse() {
        let gp = toy_gp(1e-2);
        let kernel = gp.kernel().clone();
        let x = vec![vec![0.1], vec![0.4], vec![0.75]];
        let y = DVector::from_column_slice(&[0.3, -0.6, 1.1]);
        let k = kernel.covariance(&x);
        let k_inv = invert_direct(&k);
        let n = 3.0;
        let det = k[(0, 0)] * (k[(1, 1)] * k[(2, 2)] - k[(1, 2)] * k[(2, 1)])
            - k[(0, 1)] * (k[(1, 0)] * k[(2, 2)] - k[(1, 2)] * k[(2, 0)])
            + k[(0, 2)] * (k[(1, 0)] * k[(2, 1)] - k[(1, 1)] * k[(2, 0)]);
        let direct = -0.5 * y.dot(&(&k_inv * &y)) - 0.5 * det.ln() - 0.5 * n * LN_2PI;
        assert!((gp.log_marginal_likelihood() - direct).abs() < 1e-8);
    }

    #[test]
    fn gaussian_ei_closed_form_values() {
        // At mean = f_star with unit sigma, EI is the standard normal density
        // at zero.
        assert_abs_diff_eq!(gaussian_ei(0.0, 1.0, 0.0), 0.3989422804014327, epsilon = 1e-12);
        assert_eq!(gaussian_ei(-0.5, 0.0, 0.0), 0.0);
        assert_abs_diff_eq!(gaussian_ei(0.7, 0.0, 0.5), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_ei_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let normal = Normal::new(0.4, 0.8).unwrap();
        let n = 1_000_000;
        let imps: Vec<f64> = (0..n)
            .map(|_| (normal.sample(&mut rng) - 0.6f64).max(0.0))
            .collect();
        let (mc, se) = crate::testkit::mean_and_se(&imps);
        let exact = gaussian_ei(0.4, 0.64, 0.6);
        assert!((exact - mc).abs() <= 3.0 * se, "EI {exact} vs MC {mc}");
    }

    #[test]
    fn map_fit_improves_on_start_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let truth = KernelSpec::Matern32Ard {
            lengthscales: vec![0.4],
            outputscale: 1.2,
            noise: 1e-3,
        };
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.gen::<f64>()]).collect();
        let k = truth.covariance(&x);
        let chol = chol_with_jitter(&k).unwrap();
        let z = DVector::from_iterator(40, (0..40).map(|_| {
            Normal::new(0.0, 1.0).unwrap().sample(&mut rng)
        }));
        let y_vec = chol.l_dirty().lower_triangle() * z;
        let y: Vec<f64> = y_vec.iter().copied().collect();

        let priors = HyperPriors::default();
        let objective = MapObjective {
            x: &x,
            y: DVector::from_column_slice(&y),
            priors: &priors,
            dims: 1,
        };
        let fitted = fit_map(&x, &y, &priors, &MapFitConfig::default(), &mut rng).unwrap();
        let theta = match &fitted {
            KernelSpec::Matern32Ard {
                lengthscales,
                outputscale,
                noise,
            } => vec![lengthscales[0].ln(), outputscale.ln(), noise.ln()],
            _ => unreachable!(),
        };
        let (fit_value, _) = objective.value_and_grad(&theta).unwrap();

        // The fitted objective dominates the deterministic start and a batch
        // of prior-drawn starts.
        let mut start = vec![(priors.lengthscale_gamma.0 / priors.lengthscale_gamma.1).ln()];
        start.push((priors.outputscale_gamma.0 / priors.outputscale_gamma.1).ln());
        start.push(priors.log_noise_normal.0);
        if let Some((v0, _)) = objective.value_and_grad(&start) {
            assert!(fit_value >= v0 - 1e-6);
        }
        let mut check_rng = ChaCha8Rng::seed_from_u64(48);
        for _ in 0..10 {
            if let KernelSpec::Matern32Ard {
                lengthscales,
                outputscale,
                noise,
            } = priors.sample_kernel(1, &mut check_rng)
            {
                let t = vec![lengthscales[0].ln(), outputscale.ln(), noise.ln()];
                if let Some((v, _)) = objective.value_and_grad(&t) {
                    assert!(fit_value >= v - 1e-6, "restart start beat the fit");
                }
            }
        }
    }

    #[test]
    fn map_fit_recovers_lengthscale() {
        use rayon::prelude::*;
        let truth_ls = 0.35;
        let trials = 50;
        let cfg = MapFitConfig {
            restarts: 2,
            steps: 100,
            step_size: 0.1,
        };
        let hits: usize = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = ChaCha8Rng::seed_from_u64(5300 + trial as u64);
                let truth = KernelSpec::Matern32Ard {
                    lengthscales: vec![truth_ls],
                    outputscale: 1.0,
                    noise: 1e-3,
                };
                let n = 200;
                let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen::<f64>()]).collect();
                let k = truth.covariance(&x);
                let chol = chol_with_jitter(&k).unwrap();
                let z = DVector::from_iterator(
                    n,
                    (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)),
                );
                let y_vec = chol.l_dirty().lower_triangle() * z;
                let y: Vec<f64> = y_vec.iter().copied().collect();
                let fitted = fit_map(&x, &y, &HyperPriors::default(), &cfg, &mut rng).unwrap();
                if let KernelSpec::Matern32Ard { lengthscales, .. } = fitted {
                    let ratio = lengthscales[0] / truth_ls;
                    usize::from((0.5..=2.0).contains(&ratio))
                } else {
                    0
                }
            })
            .sum();
        assert!(hits >= 40, "recovered lengthscale in {hits}/{trials} trials");
    }

    #[test]
    fn posterior_variance_bounded_and_permutation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let kernel = KernelSpec::default_rbf();
        let x: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.gen::<f64>()]).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let gp = GpPosterior::fit(kernel.clone(), &x, &y).unwrap();

        let mut perm_x = x.clone();
        let mut perm_y = y.clone();
        perm_x.reverse();
        perm_y.reverse();
        let gp_perm = GpPosterior::fit(kernel.clone(), &perm_x, &perm_y).unwrap();

        for i in 0..20 {
            let q = vec![i as f64 / 19.0];
            let (m1, v1) = gp.predict(&q);
            let (m2, v2) = gp_perm.predict(&q);
            assert!(v1 <= kernel.outputscale() + 1e-9);
            assert!((m1 - m2).abs() < 1e-9 && (v1 - v2).abs() < 1e-9);
        }
    }

    #[test]
    fn function_sampler_is_consistent() {
        let kernel = KernelSpec::default_rbf();
        let mut f = GpFunctionSampler::new(kernel, 7);
        let a = f.eval(&[0.3]).unwrap();
        let _ = f.eval(&[0.8]).unwrap();
        assert_eq!(f.eval(&[0.3]).unwrap(), a);
    }
}
