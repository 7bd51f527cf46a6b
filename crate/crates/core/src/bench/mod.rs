//! Benchmark harness: synthetic discrete lookup tasks drawn from a prior,
//! optimizer comparison with wins/ties/rank/regret aggregation, and report
//! emission.

mod optimizers;
mod report;

pub use optimizers::{
    EbGpEiOptimizer, ExactGpEiOptimizer, PfnPoolOptimizer, PoolOptimizer, RandomSearchOptimizer,
};
pub use report::{emit_report, read_long_csv, LongRecord};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{add_spurious_dims, PriorConfig};

/// A lookup-table optimization task: finitely many candidate points with
/// precomputed outputs and a known best value.
#[derive(Debug, Clone)]
pub struct DiscreteTask {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub best: f64,
}

impl DiscreteTask {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::Domain("task rows mismatch".into()));
        }
        for i in 0..x.nrows() {
            for j in 0..i {
                if x.row(i) == x.row(j) {
                    return Err(Error::Domain(format!("duplicate candidate row {i}")));
                }
            }
        }
        let best = y.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        Ok(Self { x, y, best })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Output for a candidate row, if it is in the table.
    pub fn lookup(&self, x: &[f64]) -> Option<f64> {
        (0..self.x.nrows())
            .find(|i| self.x.row(*i).as_slice().unwrap() == x)
            .map(|i| self.y[i])
    }
}

/// Serializable benchmark container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkFile {
    pub dims: usize,
    pub tasks: Vec<TaskData>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl BenchmarkFile {
    pub fn from_tasks(tasks: &[DiscreteTask]) -> Self {
        let dims = tasks.first().map_or(0, DiscreteTask::dim);
        Self {
            dims,
            tasks: tasks
                .iter()
                .map(|t| TaskData {
                    x: t.x.rows().into_iter().map(|r| r.to_vec()).collect(),
                    y: t.y.clone(),
                })
                .collect(),
        }
    }

    pub fn to_tasks(&self) -> Result<Vec<DiscreteTask>> {
        self.tasks
            .iter()
            .map(|t| {
                let rows = t.x.len();
                let mut x = Array2::zeros((rows, self.dims));
                for (i, row) in t.x.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        x[[i, j]] = *v;
                    }
                }
                DiscreteTask::new(x, t.y.clone())
            })
            .collect()
    }
}

/// Draws independent lookup tasks from a prior: `n_points` candidates
/// sampled uniformly, outputs drawn jointly from the prior.
pub fn make_benchmark(
    prior: &PriorConfig,
    n_tasks: usize,
    n_points: usize,
    dims: usize,
    seed: u64,
) -> Result<Vec<DiscreteTask>> {
    if n_points < 2 {
        return Err(Error::Domain("need at least 2 points per task".into()));
    }
    let sampler = prior.sampler();
    (0..n_tasks)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let ds = sampler.sample(n_points, dims, &mut rng)?;
            DiscreteTask::new(ds.x, ds.y)
        })
        .collect()
}

/// Lookup tasks with a fixed number of pure-noise columns planted among the
/// live ones. Returns each task with its spurious-column mask.
pub fn make_spurious_benchmark(
    prior: &PriorConfig,
    n_tasks: usize,
    n_points: usize,
    dims: usize,
    spurious: usize,
    seed: u64,
) -> Result<Vec<(DiscreteTask, Vec<bool>)>> {
    let fraction = spurious as f64 / dims as f64;
    let wrapped = add_spurious_dims(prior.sampler(), fraction);
    (0..n_tasks)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x517c_c1b7_2722_0a95));
            let (ds, mask) = wrapped.sample_with_mask(n_points, dims, &mut rng)?;
            Ok((DiscreteTask::new(ds.x, ds.y)?, mask))
        })
        .collect()
}

/// Pairwise outcome counts at the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pairwise {
    pub a: String,
    pub b: String,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

/// Aggregated comparison results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub optimizers: Vec<String>,
    /// Steps per run including the shared initial observation.
    pub horizon: usize,
    pub completed_runs: usize,
    pub failed_runs: usize,
    /// Mean simple regret per optimizer over time, with 95% half-widths.
    pub regret_mean: Vec<Vec<f64>>,
    pub regret_ci: Vec<Vec<f64>>,
    /// Mean rank per optimizer over time (ties share averaged ranks).
    pub rank_mean: Vec<Vec<f64>>,
    pub rank_ci: Vec<Vec<f64>>,
    pub pairwise: Vec<Pairwise>,
    /// Long-format rows, merged deterministically by task index.
    pub records: Vec<LongRecord>,
}

impl ComparisonReport {
    pub fn final_regret(&self, optimizer: usize) -> f64 {
        *self.regret_mean[optimizer].last().unwrap()
    }

    pub fn final_rank(&self, optimizer: usize) -> f64 {
        *self.rank_mean[optimizer].last().unwrap()
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&Pairwise> {
        self.pairwise
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }
}

/// Runs every optimizer on every task with a shared per-(task, repetition)
/// initial observation and aggregates regret, ranks and pairwise outcomes.
pub fn run_comparison(
    optimizers: &[&dyn PoolOptimizer],
    tasks: &[DiscreteTask],
    budget: usize,
    repetitions: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    if optimizers.is_empty() || tasks.is_empty() {
        return Err(Error::Domain("nothing to compare".into()));
    }
    let n_opt = optimizers.len();
    let horizon = budget + 1;

    struct RunSet {
        /// Incumbent traces per optimizer; None marks a failed run.
        traces: Vec<Option<Vec<f64>>>,
        task: usize,
        rep: usize,
    }

    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..repetitions).map(move |r| (t, r)))
        .collect();
    let runs: Vec<RunSet> = jobs
        .par_iter()
        .map(|(task_idx, rep)| {
            let task = &tasks[*task_idx];
            let mut seed_rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((*task_idx as u64) << 20) ^ ((*rep as u64) << 4),
            );
            let init_index = seed_rng.gen_range(0..task.len());
            let traces = optimizers
                .iter()
                .map(|opt| {
                    let run_seed: u64 = seed_rng.gen();
                    match opt.run(task, budget, init_index, run_seed) {
                        Ok(mut trace) => {
                            // Pool exhaustion ends early; carry the incumbent.
                            let last = *trace.last().unwrap_or(&f64::NEG_INFINITY);
                            trace.resize(horizon, last);
                            Some(trace)
                        }
                        Err(_) => None,
                    }
                })
                .collect();
            RunSet {
                traces,
                task: *task_idx,
                rep: *rep,
            }
        })
        .collect();

    let mut regret_samples: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); horizon]; n_opt];
    let mut rank_samples: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); horizon]; n_opt];
    let mut pairwise: Vec<Pairwise> = Vec::new();
    for a in 0..n_opt {
        for b in a + 1..n_opt {
            pairwise.push(Pairwise {
                a: optimizers[a].name().to_string(),
                b: optimizers[b].name().to_string(),
                wins_a: 0,
                wins_b: 0,
                ties: 0,
            });
        }
    }
    let mut records = Vec::new();
    let mut completed = 0usize;
    let mut failed = 0usize;

    for run in &runs {
        if run.traces.iter().any(Option::is_none) {
            failed += 1;
            continue;
        }
        completed += 1;
        let task = &tasks[run.task];
        let traces: Vec<&Vec<f64>> = run.traces.iter().map(|t| t.as_ref().unwrap()).collect();

        for step in 0..horizon {
            // Ranks: higher incumbent is better; ties share averaged ranks.
            let mut order: Vec<usize> = (0..n_opt).collect();
            order.sort_by(|x, y| traces[*y][step].partial_cmp(&traces[*x][step]).unwrap());
            let mut ranks = vec![0.0; n_opt];
            let mut i = 0;
            while i < n_opt {
                let mut j = i;
                while j + 1 < n_opt && traces[order[j + 1]][step] == traces[order[i]][step] {
                    j += 1;
                }
                let shared = (i + j + 2) as f64 / 2.0;
                for k in i..=j {
                    ranks[order[k]] = shared;
                }
                i = j + 1;
            }
            for opt in 0..n_opt {
                let regret = task.best - traces[opt][step];
                regret_samples[opt][step].push(regret);
                rank_samples[opt][step].push(ranks[opt]);
                records.push(LongRecord {
                    optimizer: optimizers[opt].name().to_string(),
                    task: run.task,
                    rep: run.rep,
                    step,
                    regret,
                    rank: ranks[opt],
                });
            }
        }

        let mut pair_idx = 0;
        for a in 0..n_opt {
            for b in a + 1..n_opt {
                let fa = traces[a][horizon - 1];
                let fb = traces[b][horizon - 1];
                if fa == fb {
                    pairwise[pair_idx].ties += 1;
                } else if fa > fb {
                    pairwise[pair_idx].wins_a += 1;
                } else {
                    pairwise[pair_idx].wins_b += 1;
                }
                pair_idx += 1;
            }
        }
    }

    if completed == 0 {
        return Err(Error::Domain("every run failed".into()));
    }

    let summarize = |samples: &Vec<Vec<Vec<f64>>>| {
        let mut mean = vec![vec![0.0; horizon]; n_opt];
        let mut ci = vec![vec![0.0; horizon]; n_opt];
        for opt in 0..n_opt {
            for step in 0..horizon {
                let vals = &samples[opt][step];
                let n = vals.len() as f64;
                let m = vals.iter().sum::<f64>() / n;
                let var =
                    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                mean[opt][step] = m;
                ci[opt][step] = 1.96 * (var / n).sqrt();
            }
        }
        (mean, ci)
    };
    let (regret_mean, regret_ci) = summarize(&regret_samples);
    let (rank_mean, rank_ci) = summarize(&rank_samples);

    Ok(ComparisonReport {
        optimizers: optimizers.iter().map(|o| o.name().to_string()).collect(),
        horizon,
        completed_runs: completed,
        failed_runs: failed,
        regret_mean,
        regret_ci,
        rank_mean,
        rank_ci,
        pairwise,
        records,
    })
}
