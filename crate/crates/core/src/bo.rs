//! The sequential optimization loop: initial design, per-iteration history
//! transforms, candidate proposal through the surrogate, evaluation with one
//! retry, and trajectory recording.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acqopt::{propose, AcqSpec, PfnAcquisition, ProposeConfig, SearchSpace};
use crate::error::{Error, Result};
use crate::kg::ei_kg_policy;
use crate::pfn::{HeadMode, PfnModel, StyleInput, StyleVocab};
use crate::sobol::sobol_points;
use crate::transforms::{
    fit_warp, from_unit_cube, to_unit_cube, OutputTransform, WarpFitConfig, WarpParams,
};

/// Initial design kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDesign {
    /// As many low-discrepancy points as the space has dimensions.
    Sobol,
    /// The single lower-corner point.
    Min,
    /// The single center point.
    Mid,
}

/// Acquisition policy for the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AcqChoice {
    Ei,
    Pi,
    Ucb { quantile: f64 },
    EiOnMean,
    /// Learned one-step lookahead; requires the mode style vocabulary.
    Kg,
    /// Coin-flip mixture of lookahead and expected improvement.
    EiKgMix { kg_probability: f64 },
}

/// Loop settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// Evaluations after the initial design.
    pub budget: usize,
    pub init: InitDesign,
    pub acq: AcqChoice,
    pub propose: ProposeConfig,
    /// Fit the input warp and apply it to the history and the candidates.
    pub enable_warp: bool,
    /// Refit cadence in iterations.
    pub warp_every: usize,
    pub warp_fit: WarpFitConfig,
    /// Refit the output power transform every iteration. Disabled for
    /// surrogate-parity comparisons on raw prior samples.
    pub enable_output_transform: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 50,
            init: InitDesign::Min,
            acq: AcqChoice::Ei,
            propose: ProposeConfig::default(),
            enable_warp: false,
            warp_every: 5,
            warp_fit: WarpFitConfig::default(),
            enable_output_transform: true,
        }
    }
}

/// One evaluated point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub y_raw: f64,
    pub y_transformed: f64,
    /// Best raw observation so far.
    pub incumbent: f64,
    /// Which acquisition picked this point ("init" for the design).
    pub acq_label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryStatus {
    Completed,
    PoolExhausted,
}

/// Time-ordered record of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub config_fingerprint: String,
    pub model_steps: u64,
    pub steps: Vec<TrajectoryStep>,
    /// Evaluations that errored (once each; a second failure aborts).
    pub failed: Vec<(usize, Vec<f64>)>,
    pub status: TrajectoryStatus,
}

impl Trajectory {
    pub fn incumbent(&self) -> Option<f64> {
        self.steps.last().map(|s| s.incumbent)
    }

    /// Incumbent value after `k` evaluations.
    pub fn incumbent_at(&self, k: usize) -> Option<f64> {
        self.steps.get(k.min(self.steps.len()) - 1).map(|s| s.incumbent)
    }

    /// `iteration,x_0..x_{d-1},y_raw,incumbent` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let d = self.steps.first().map_or(0, |s| s.x.len());
        write!(out, "iteration,")?;
        for j in 0..d {
            write!(out, "x_{j},")?;
        }
        writeln!(out, "y_raw,incumbent")?;
        for s in &self.steps {
            write!(out, "{},", s.iteration)?;
            for v in &s.x {
                write!(out, "{v},")?;
            }
            writeln!(out, "{},{}", s.y_raw, s.incumbent)?;
        }
        Ok(())
    }

    /// Run metadata sidecar.
    pub fn write_metadata<W: Write>(&self, out: &mut W) -> Result<()> {
        let meta = serde_json::json!({
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "model_steps": self.model_steps,
            "status": self.status,
            "evaluations": self.steps.len(),
            "failed_evaluations": self.failed.len(),
            "acq_labels": self.steps.iter().map(|s| s.acq_label.clone()).collect::<Vec<_>>(),
        });
        serde_json::to_writer_pretty(&mut *out, &meta)
            .map_err(|e| Error::Config(format!("metadata serialization: {e}")))?;
        writeln!(out)?;
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x1_0000_0000_01b3);
    }
    hash
}

/// Deterministic fingerprint of the loop configuration.
pub fn config_fingerprint(cfg: &BoConfig) -> String {
    let json = serde_json::to_vec(cfg).unwrap_or_default();
    format!("{:016x}", fnv1a(&json))
}

/// Points of the initial design, in raw coordinates. In pool mode the design
/// picks pool rows (nearest to the ideal design points).
pub fn initial_design(
    space: &SearchSpace,
    kind: InitDesign,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let bounds = space.bounds();
    let d = space.dim();
    let ideal: Vec<Vec<f64>> = match kind {
        InitDesign::Sobol => sobol_points(d, d, rng)
            .into_iter()
            .map(|u| from_unit_cube(&bounds, &u))
            .collect(),
        InitDesign::Min => vec![bounds.iter().map(|(lo, _)| *lo).collect()],
        InitDesign::Mid => vec![bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()],
    };
    match &space.pool {
        None => ideal,
        Some(pool) => {
            let mut used = vec![false; pool.nrows()];
            ideal
                .iter()
                .map(|target| {
                    let mut best = (0usize, f64::INFINITY);
                    for (i, row) in pool.rows().into_iter().enumerate() {
                        if used[i] {
                            continue;
                        }
                        let dist: f64 = row
                            .iter()
                            .zip(target.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        if dist < best.1 {
                            best = (i, dist);
                        }
                    }
                    used[best.0] = true;
                    pool.row(best.0).to_vec()
                })
                .collect()
        }
    }
}

/// Objective callback; errors are retried once with a fresh proposal.
pub type Objective<'a> = dyn FnMut(&[f64]) -> std::result::Result<f64, String> + 'a;

struct LoopState {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    steps: Vec<TrajectoryStep>,
    failed: Vec<(usize, Vec<f64>)>,
}

impl LoopState {
    fn record(&mut self, iteration: usize, x: Vec<f64>, y: f64, y_t: f64, label: &str) {
        let incumbent = self
            .steps
            .last()
            .map_or(y, |s| s.incumbent.max(y));
        self.xs.push(x.clone());
        self.ys.push(y);
        self.steps.push(TrajectoryStep {
            iteration,
            x,
            y_raw: y,
            y_transformed: y_t,
            incumbent,
            acq_label: label.to_string(),
        });
    }
}

/// Runs the optimization loop and returns the trajectory. The objective is
/// maximized over the raw search space.
pub fn run_bo(
    objective: &mut Objective<'_>,
    model: &PfnModel,
    space: &SearchSpace,
    cfg: &BoConfig,
    base_style: &StyleInput,
    seed: u64,
) -> Result<Trajectory> {
    run_bo_with_history(objective, model, space, cfg, base_style, seed, &[])
}

/// Like [`run_bo`], but seeded with already-observed points instead of an
/// initial design when `given` is nonempty.
pub fn run_bo_with_history(
    objective: &mut Objective<'_>,
    model: &PfnModel,
    space: &SearchSpace,
    cfg: &BoConfig,
    base_style: &StyleInput,
    seed: u64,
    given: &[(Vec<f64>, f64)],
) -> Result<Trajectory> {
    space.validate()?;
    if cfg.budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let needs_mode = matches!(cfg.acq, AcqChoice::Kg | AcqChoice::EiKgMix { .. });
    if needs_mode && model.config().style != StyleVocab::Mode {
        return Err(Error::Config(
            "lookahead acquisitions need a mode-style model".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = space.bounds();
    let d = space.dim();
    let mut state = LoopState {
        xs: Vec::new(),
        ys: Vec::new(),
        steps: Vec::new(),
        failed: Vec::new(),
    };

    // Initial design (or the given observations) with one retry per failure.
    let mut iteration = 0;
    if given.is_empty() {
        for x in initial_design(space, cfg.init, &mut rng) {
            match objective(&x) {
                Ok(y) => state.record(iteration, x, y, y, "init"),
                Err(_) => {
                    state.failed.push((iteration, x));
                    let replacement = replacement_point(space, &state, &mut rng)?;
                    let y = objective(&replacement)
                        .map_err(Error::ObjectiveFailed)?;
                    state.record(iteration, replacement, y, y, "init");
                }
            }
            iteration += 1;
        }
    } else {
        for (x, y) in given {
            state.record(iteration, x.clone(), *y, *y, "given");
            iteration += 1;
        }
    }

    let mut warp: Option<WarpParams> = None;
    let mut status = TrajectoryStatus::Completed;
    for bo_iter in 0..cfg.budget {
        // History to the unit cube, outputs through a fresh power transform.
        let unit_x: Vec<Vec<f64>> = state
            .xs
            .iter()
            .map(|x| to_unit_cube(&bounds, x).0)
            .collect();
        let transform = if cfg.enable_output_transform {
            OutputTransform::fit(&state.ys).unwrap_or_else(|_| {
                // A single observation cannot be standardized.
                OutputTransform::identity()
            })
        } else {
            OutputTransform::identity()
        };
        let y_t: Vec<f64> = state.ys.iter().map(|y| transform.apply(*y)).collect();
        let f_star = y_t.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));

        let mut unit_mat = Array2::zeros((unit_x.len(), d));
        for (i, row) in unit_x.iter().enumerate() {
            for j in 0..d {
                unit_mat[[i, j]] = row[j];
            }
        }

        if cfg.enable_warp && unit_x.len() >= 3 && bo_iter % cfg.warp_every == 0 {
            let (params, _) = fit_warp(model, &unit_mat, &y_t, &cfg.warp_fit, &mut rng)?;
            warp = Some(params);
        }

        let mut ctx_unit = unit_mat.clone();
        if let Some(w) = &warp {
            for mut row in ctx_unit.rows_mut() {
                let warped = w.apply_row(row.as_slice().unwrap());
                for (v, wv) in row.iter_mut().zip(warped) {
                    *v = wv;
                }
            }
        }
        let ctx_features = crate::priors::pad_and_scale(&ctx_unit, model.config().capacity)?;

        let use_kg = match cfg.acq {
            AcqChoice::Kg => true,
            AcqChoice::EiKgMix { kg_probability } => ei_kg_policy(kg_probability, &mut rng),
            _ => false,
        };
        let (spec, style, label) = if use_kg {
            (
                AcqSpec::Mean,
                StyleInput::Mode(HeadMode::Lookahead),
                "kg",
            )
        } else {
            let spec = match cfg.acq {
                AcqChoice::Pi => AcqSpec::Pi { f_star },
                AcqChoice::Ucb { quantile } => AcqSpec::Ucb { quantile },
                AcqChoice::EiOnMean => AcqSpec::EiOnMean { f_star },
                _ => AcqSpec::Ei { f_star },
            };
            let style = match base_style {
                StyleInput::Mode(_) => StyleInput::Mode(HeadMode::Plain),
                other => other.clone(),
            };
            (spec, style, "ei")
        };

        let acq = PfnAcquisition {
            model,
            ctx_features,
            ctx_y: y_t,
            style,
            spec,
            dim: d,
            warp: warp.clone(),
        };

        let proposal = match propose(&acq, space, &state.xs, &cfg.propose, &mut rng) {
            Ok(x) => x,
            Err(Error::ExhaustedSpace) => {
                status = TrajectoryStatus::PoolExhausted;
                break;
            }
            Err(e) => return Err(e),
        };

        let x = match objective(&proposal) {
            Ok(y) => {
                let yt = transform.apply(y);
                state.record(iteration, proposal, y, yt, label);
                iteration += 1;
                continue;
            }
            Err(_) => {
                state.failed.push((iteration, proposal.clone()));
                let mut excluded = state.xs.clone();
                excluded.push(proposal);
                match propose(&acq, space, &excluded, &cfg.propose, &mut rng) {
                    Ok(x) => x,
                    Err(Error::ExhaustedSpace) => {
                        status = TrajectoryStatus::PoolExhausted;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let y = objective(&x).map_err(Error::ObjectiveFailed)?;
        let yt = transform.apply(y);
        state.record(iteration, x, y, yt, label);
        iteration += 1;
    }

    Ok(Trajectory {
        seed,
        config_fingerprint: config_fingerprint(cfg),
        model_steps: model.trained_steps(),
        steps: state.steps,
        failed: state.failed,
        status,
    })
}

/// A fresh point for retrying a failed initial evaluation.
fn replacement_point(
    space: &SearchSpace,
    state: &LoopState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if let Some(pool) = &space.pool {
        for _ in 0..pool.nrows() * 4 {
            let row: Vec<f64> = pool.row(rng.gen_range(0..pool.nrows())).to_vec();
            if !state.xs.contains(&row) {
                return Ok(row);
            }
        }
        return Err(Error::ExhaustedSpace);
    }
    let bounds = space.bounds();
    Ok(bounds
        .iter()
        .map(|(lo, hi)| lo + rng.gen::<f64>() * (hi - lo))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfn::PfnConfig;
    use crate::riemann::build_borders;
    use ndarray::array;

    fn tiny_model() -> PfnModel {
        let cfg = PfnConfig {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ff_dim: 64,
            capacity: 2,
            num_buckets: 12,
            style: StyleVocab::None,
            ..PfnConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..20_000).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let layout = build_borders(&draws, cfg.num_buckets + 2).unwrap();
        PfnModel::new(cfg, layout, 5).unwrap()
    }

    fn fast_cfg(budget: usize) -> BoConfig {
        BoConfig {
            budget,
            init: InitDesign::Mid,
            acq: AcqChoice::Ei,
            propose: ProposeConfig {
                num_candidates: 64,
                top_k: 4,
                refine_iters: 4,
                grad_tol: 1e-6,
            },
            enable_warp: false,
            warp_every: 5,
            warp_fit: WarpFitConfig::default(),
            enable_output_transform: true,
        }
    }

    #[test]
    fn initial_designs_match_definitions() {
        let space = SearchSpace::unit_cube(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            initial_design(&space, InitDesign::Mid, &mut rng),
            vec![vec![0.5, 0.5]]
        );
        assert_eq!(
            initial_design(&space, InitDesign::Min, &mut rng),
            vec![vec![0.0, 0.0]]
        );
        let sobol = initial_design(&space, InitDesign::Sobol, &mut rng);
        assert_eq!(sobol.len(), 2);
        assert_ne!(sobol[0], sobol[1]);
        let space3 = SearchSpace::unit_cube(3);
        let sobol3 = initial_design(&space3, InitDesign::Sobol, &mut rng);
        assert_eq!(sobol3.len(), 3);
        for p in &sobol3 {
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn budget_one_init_one_gives_two_steps() {
        let model = tiny_model();
        let space = SearchSpace::unit_cube(2);
        let mut objective =
            |x: &[f64]| Ok::<f64, String>(-(x[0] - 0.3).powi(2) - (x[1] - 0.6).powi(2));
        let traj = run_bo(
            &mut objective,
            &model,
            &space,
            &fast_cfg(1),
            &StyleInput::None,
            7,
        )
        .unwrap();
        assert_eq!(traj.steps.len(), 2);
        assert_eq!(traj.status, TrajectoryStatus::Completed);
    }

    #[test]
    fn pool_optimum_found_by_exhaustion() {
        let model = tiny_model();
        let pool = array![[0.1, 0.1], [0.4, 0.2], [0.7, 0.9], [0.25, 0.55]];
        let values = [0.3, -0.2, 0.9, 0.1];
        let space = SearchSpace::discrete_pool(pool.clone());
        let mut objective = |x: &[f64]| {
            let idx = (0..pool.nrows())
                .find(|i| pool.row(*i).to_vec() == x)
                .expect("pool row");
            Ok::<f64, String>(values[idx])
        };
        let traj = run_bo(
            &mut objective,
            &model,
            &space,
            &fast_cfg(10),
            &StyleInput::None,
            11,
        )
        .unwrap();
        assert_eq!(traj.status, TrajectoryStatus::PoolExhausted);
        assert_eq!(traj.incumbent(), Some(0.9));
        // No point evaluated twice.
        for i in 0..traj.steps.len() {
            for j in 0..i {
                assert_ne!(traj.steps[i].x, traj.steps[j].x);
            }
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_trajectories() {
        let model = tiny_model();
        let space = SearchSpace::unit_cube(2);
        let run = || {
            let mut objective =
                |x: &[f64]| Ok::<f64, String>((x[0] * 7.0).sin() + (x[1] * 3.0).cos());
            run_bo(
                &mut objective,
                &model,
                &space,
                &fast_cfg(6),
                &StyleInput::None,
                13,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.steps.len(), b.steps.len());
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.x, sb.x);
            assert!(sa.y_raw.to_bits() == sb.y_raw.to_bits());
            assert!(sa.incumbent.to_bits() == sb.incumbent.to_bits());
        }
    }

    #[test]
    fn incumbent_is_monotone_and_points_stay_in_bounds() {
        let model = tiny_model();
        let space = SearchSpace {
            dims: vec![
                crate::acqopt::DimKind::Continuous { lo: -3.0, hi: 2.0 },
                crate::acqopt::DimKind::Integer { lo: 1, hi: 8 },
            ],
            pool: None,
        };
        let mut objective = |x: &[f64]| Ok::<f64, String>(-x[0].abs() - (x[1] - 4.0).abs());
        let traj = run_bo(
            &mut objective,
            &model,
            &space,
            &fast_cfg(8),
            &StyleInput::None,
            17,
        )
        .unwrap();
        let mut prev = f64::NEG_INFINITY;
        for s in &traj.steps {
            assert!(s.incumbent >= prev);
            prev = s.incumbent;
            assert!(space.contains(&s.x), "{:?} outside space", s.x);
        }
    }

    #[test]
    fn failed_evaluation_is_retried_then_aborts() {
        let model = tiny_model();
        let space = SearchSpace::unit_cube(1);
        // Fails exactly once, at the first post-design evaluation.
        let mut calls = 0;
        let mut objective = |x: &[f64]| {
            calls += 1;
            if calls == 2 {
                Err("boom".to_string())
            } else {
                Ok(x[0])
            }
        };
        let traj = run_bo(
            &mut objective,
            &model,
            &space,
            &fast_cfg(2),
            &StyleInput::None,
            19,
        )
        .unwrap();
        assert_eq!(traj.failed.len(), 1);
        assert_eq!(traj.steps.len(), 3);

        let mut objective_always_fails =
            |_: &[f64]| Err::<f64, String>("always".to_string());
        let err = run_bo(
            &mut objective_always_fails,
            &model,
            &space,
            &fast_cfg(1),
            &StyleInput::None,
            19,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ObjectiveFailed(_)));
    }

    #[test]
    fn csv_round_trip_shape() {
        let model = tiny_model();
        let space = SearchSpace::unit_cube(2);
        let mut objective = |x: &[f64]| Ok::<f64, String>(x[0] + x[1]);
        let traj = run_bo(
            &mut objective,
            &model,
            &space,
            &fast_cfg(3),
            &StyleInput::None,
            23,
        )
        .unwrap();
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,x_0,x_1,y_raw,incumbent");
        assert_eq!(lines.len(), 1 + traj.steps.len());
        let mut meta = Vec::new();
        traj.write_metadata(&mut meta).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&meta).unwrap();
        assert_eq!(parsed["seed"], 23);
    }

    #[test]
    fn transform_round_trip_keeps_points_in_bounds() {
        let bounds = [(-3.0, 2.0), (1.0, 8.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let x = vec![
                -3.0 + rng.gen::<f64>() * 5.0,
                1.0 + rng.gen::<f64>() * 7.0,
            ];
            let (u, _) = to_unit_cube(&bounds, &x);
            let back = from_unit_cube(&bounds, &u);
            assert!(back[0] >= -3.0 && back[0] <= 2.0);
            assert!(back[1] >= 1.0 && back[1] <= 8.0);
            assert!((back[0] - x[0]).abs() < 1e-9 && (back[1] - x[1]).abs() < 1e-9);
        }
    }
}
