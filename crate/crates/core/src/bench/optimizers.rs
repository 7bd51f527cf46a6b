//! Optimizers speaking the discrete-pool protocol: observe a shared initial
//! point, then propose pool rows one at a time.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DiscreteTask;
use crate::bo::{run_bo_with_history, BoConfig};
use crate::error::{Error, Result};
use crate::oracle::{fit_map, gaussian_ei, GpPosterior, HyperPriors, KernelSpec, MapFitConfig};
use crate::pfn::{PfnModel, StyleInput};

/// A pool optimizer returns its incumbent trace: entry zero is the shared
/// initial observation, each further entry follows one proposal.
pub trait PoolOptimizer: Sync {
    fn name(&self) -> &str;

    fn run(
        &self,
        task: &DiscreteTask,
        budget: usize,
        init_index: usize,
        seed: u64,
    ) -> Result<Vec<f64>>;
}

/// Uniformly samples unevaluated pool rows.
pub struct RandomSearchOptimizer {
    name: String,
}

impl RandomSearchOptimizer {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
        }
    }
}

impl PoolOptimizer for RandomSearchOptimizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(
        &self,
        task: &DiscreteTask,
        budget: usize,
        init_index: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut remaining: Vec<usize> = (0..task.len()).filter(|i| *i != init_index).collect();
        remaining.shuffle(&mut rng);
        let mut incumbent = task.y[init_index];
        let mut trace = vec![incumbent];
        for idx in remaining.into_iter().take(budget) {
            incumbent = incumbent.max(task.y[idx]);
            trace.push(incumbent);
        }
        Ok(trace)
    }
}

/// Expected improvement under an exact fixed-hyperparameter GP posterior.
pub struct ExactGpEiOptimizer {
    name: String,
    kernel: KernelSpec,
}

impl ExactGpEiOptimizer {
    pub fn new(name: &str, kernel: KernelSpec) -> Self {
        Self {
            name: name.to_string(),
            kernel,
        }
    }

    pub fn default_rbf(name: &str) -> Self {
        Self::new(name, KernelSpec::default_rbf())
    }
}

fn gp_ei_loop(
    kernel_for: &mut dyn FnMut(&[Vec<f64>], &[f64]) -> Result<KernelSpec>,
    task: &DiscreteTask,
    budget: usize,
    init_index: usize,
) -> Result<Vec<f64>> {
    let mut observed: Vec<usize> = vec![init_index];
    let mut xs: Vec<Vec<f64>> = vec![task.x.row(init_index).to_vec()];
    let mut ys: Vec<f64> = vec![task.y[init_index]];
    let mut incumbent = ys[0];
    let mut trace = vec![incumbent];

    for _ in 0..budget {
        if observed.len() == task.len() {
            break;
        }
        let kernel = kernel_for(&xs, &ys)?;
        let gp = GpPosterior::fit(kernel, &xs, &ys)?;
        let f_star = incumbent;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..task.len() {
            if observed.contains(&i) {
                continue;
            }
            let (mean, var) = gp.predict(task.x.row(i).as_slice().unwrap());
            let ei = gaussian_ei(mean, var, f_star);
            if best.is_none_or(|(_, b)| ei > b) {
                best = Some((i, ei));
            }
        }
        let (idx, _) = best.ok_or(Error::ExhaustedSpace)?;
        observed.push(idx);
        xs.push(task.x.row(idx).to_vec());
        ys.push(task.y[idx]);
        incumbent = incumbent.max(task.y[idx]);
        trace.push(incumbent);
    }
    Ok(trace)
}

impl PoolOptimizer for ExactGpEiOptimizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(
        &self,
        task: &DiscreteTask,
        budget: usize,
        init_index: usize,
        _seed: u64,
    ) -> Result<Vec<f64>> {
        let kernel = self.kernel.clone();
        gp_ei_loop(&mut |_, _| Ok(kernel.clone()), task, budget, init_index)
    }
}

/// Empirical-Bayes comparator: the Matérn kernel is refit by MAP on the
/// running history before every proposal.
pub struct EbGpEiOptimizer {
    name: String,
    priors: HyperPriors,
    fit: MapFitConfig,
}

impl EbGpEiOptimizer {
    pub fn new(name: &str, priors: HyperPriors, fit: MapFitConfig) -> Self {
        Self {
            name: name.to_string(),
            priors,
            fit,
        }
    }
}

impl PoolOptimizer for EbGpEiOptimizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(
        &self,
        task: &DiscreteTask,
        budget: usize,
        init_index: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = task.dim();
        let mut kernel_for = |xs: &[Vec<f64>], ys: &[f64]| -> Result<KernelSpec> {
            if xs.len() < 2 {
                // Too little data to fit; start from the hyperprior means.
                return Ok(KernelSpec::Matern32Ard {
                    lengthscales: vec![
                        self.priors.lengthscale_gamma.0 / self.priors.lengthscale_gamma.1;
                        dims
                    ],
                    outputscale: self.priors.outputscale_gamma.0
                        / self.priors.outputscale_gamma.1,
                    noise: self.priors.log_noise_normal.0.exp(),
                });
            }
            fit_map(xs, ys, &self.priors, &self.fit, &mut rng)
        };
        gp_ei_loop(&mut kernel_for, task, budget, init_index)
    }
}

/// A trained surrogate running the full loop in pool mode.
pub struct PfnPoolOptimizer<'a> {
    name: String,
    model: &'a PfnModel,
    bo: BoConfig,
    style: StyleInput,
}

impl<'a> PfnPoolOptimizer<'a> {
    pub fn new(name: &str, model: &'a PfnModel, bo: BoConfig, style: StyleInput) -> Self {
        Self {
            name: name.to_string(),
            model,
            bo,
            style,
        }
    }
}

impl PoolOptimizer for PfnPoolOptimizer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(
        &self,
        task: &DiscreteTask,
        budget: usize,
        init_index: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let space = crate::acqopt::SearchSpace::discrete_pool(task.x.clone());
        let mut cfg = self.bo.clone();
        cfg.budget = budget;
        let mut objective = |x: &[f64]| {
            task.lookup(x)
                .ok_or_else(|| "point not in pool".to_string())
        };
        let given = vec![(task.x.row(init_index).to_vec(), task.y[init_index])];
        let traj = run_bo_with_history(
            &mut objective,
            self.model,
            &space,
            &cfg,
            &self.style,
            seed,
            &given,
        )?;
        Ok(traj.steps.iter().map(|s| s.incumbent).collect())
    }
}
