//! Candidate proposal: global random search over the unit cube followed by
//! gradient refinement of the strongest candidates, with integer handling,
//! deduplication against evaluated points, and an exhaustive mode for
//! discrete candidate pools.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{gaussian_ei, GpPosterior};
use crate::pfn::{DistFunctional, PfnModel, StyleInput};
use crate::riemann::RiemannDistribution;
use crate::transforms::{kumaraswamy_dx, WarpParams};

/// One coordinate of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DimKind {
    Continuous { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Boolean,
}

impl DimKind {
    fn bounds(&self) -> (f64, f64) {
        match self {
            DimKind::Continuous { lo, hi } => (*lo, *hi),
            DimKind::Integer { lo, hi } => (*lo as f64, *hi as f64),
            DimKind::Boolean => (0.0, 1.0),
        }
    }
}

/// Box search space, optionally restricted to a discrete candidate pool
/// (rows in raw coordinates).
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub dims: Vec<DimKind>,
    pub pool: Option<Array2<f64>>,
}

impl SearchSpace {
    pub fn unit_cube(d: usize) -> Self {
        Self {
            dims: vec![DimKind::Continuous { lo: 0.0, hi: 1.0 }; d],
            pool: None,
        }
    }

    pub fn discrete_pool(pool: Array2<f64>) -> Self {
        let d = pool.ncols();
        Self {
            dims: vec![DimKind::Continuous { lo: 0.0, hi: 1.0 }; d],
            pool: Some(pool),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.dims.iter().map(|d| d.bounds()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.dims {
            let (lo, hi) = d.bounds();
            if !(lo < hi) {
                return Err(Error::Config(format!("empty dimension [{lo}, {hi}]")));
            }
        }
        if let Some(pool) = &self.pool {
            if pool.nrows() == 0 {
                return Err(Error::Config("empty candidate pool".into()));
            }
            if pool.ncols() != self.dims.len() {
                return Err(Error::Config("pool width does not match space".into()));
            }
        }
        Ok(())
    }

    /// Whether a raw point lies inside the box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len()
            && x.iter().zip(self.dims.iter()).all(|(v, d)| {
                let (lo, hi) = d.bounds();
                *v >= lo && *v <= hi
            })
    }
}

/// Rounds to one of the two neighboring integers, with the fractional part
/// as the probability of rounding up.
pub fn probabilistic_round<R: Rng + ?Sized>(x: f64, rng: &mut R) -> i64 {
    let floor = x.floor();
    let frac = x - floor;
    floor as i64 + i64::from(rng.gen::<f64>() < frac)
}

/// Closed-form acquisition over a predictive distribution, differentiable in
/// the class masses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AcqSpec {
    Ei { f_star: f64 },
    Pi { f_star: f64 },
    Ucb { quantile: f64 },
    EiOnMean { f_star: f64 },
    /// Plain predictive mean; the lookahead acquisition is this minus a
    /// constant baseline.
    Mean,
}

impl AcqSpec {
    pub fn value(&self, dist: &RiemannDistribution) -> f64 {
        match self {
            AcqSpec::Ei { f_star } => dist.acq_ei(*f_star),
            AcqSpec::Pi { f_star } => dist.acq_pi(*f_star),
            AcqSpec::Ucb { quantile } => dist.acq_ucb(*quantile).unwrap_or(f64::NEG_INFINITY),
            AcqSpec::EiOnMean { f_star } => dist.acq_ei_on_mean(*f_star),
            AcqSpec::Mean => dist.mean(),
        }
    }
}

impl DistFunctional for AcqSpec {
    fn value(&self, dist: &RiemannDistribution) -> f64 {
        AcqSpec::value(self, dist)
    }

    fn grad_probs(&self, dist: &RiemannDistribution) -> Vec<f64> {
        match self {
            AcqSpec::Ei { f_star } => dist.class_conditional_improvement(*f_star),
            AcqSpec::Pi { f_star } => dist.class_conditional_above(*f_star),
            AcqSpec::Ucb { quantile } => {
                // Implicit differentiation of F(v) = q.
                match dist.icdf(*quantile) {
                    Ok(v) => {
                        let (cdf_parts, density) = dist.class_conditional_cdf(v);
                        let d = density.max(1e-12);
                        cdf_parts.iter().map(|f| -f / d).collect()
                    }
                    Err(_) => vec![0.0; dist.probs().len()],
                }
            }
            AcqSpec::EiOnMean { f_star } => {
                if dist.mean() > *f_star {
                    dist.class_conditional_mean()
                } else {
                    vec![0.0; dist.probs().len()]
                }
            }
            AcqSpec::Mean => dist.class_conditional_mean(),
        }
    }
}

/// Anything the proposer can query for acquisition values over unit-cube
/// points. Gradients default to central differences.
pub trait AcquisitionModel {
    /// Acquisition values for a batch of unit-cube rows.
    fn evaluate(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<f64>>;

    /// Value and gradient at one unit-cube point.
    fn evaluate_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = x.len();
        let h = 1e-5;
        let mut batch = Array2::zeros((2 * d + 1, d));
        for j in 0..d {
            batch[[0, j]] = x[j];
        }
        for j in 0..d {
            for k in 0..d {
                batch[[1 + 2 * j, k]] = x[k];
                batch[[2 + 2 * j, k]] = x[k];
            }
            batch[[1 + 2 * j, j]] = (x[j] + h).min(1.0);
            batch[[2 + 2 * j, j]] = (x[j] - h).max(0.0);
        }
        let vals = self.evaluate(batch.view())?;
        let mut grad = vec![0.0; d];
        for j in 0..d {
            let span = batch[[1 + 2 * j, j]] - batch[[2 + 2 * j, j]];
            grad[j] = if span > 0.0 {
                (vals[1 + 2 * j] - vals[2 + 2 * j]) / span
            } else {
                0.0
            };
        }
        Ok((vals[0], grad))
    }
}

/// A trained surrogate plus a fixed history, exposed as an acquisition
/// surface over the unit cube. Candidate points are warped, rescaled and
/// zero-padded before they reach the network; gradients flow back through
/// both steps, and padded coordinates are dropped.
pub struct PfnAcquisition<'a> {
    pub model: &'a PfnModel,
    /// Preprocessed (already warped, padded, rescaled) context features.
    pub ctx_features: Array2<f64>,
    /// Transformed context outputs.
    pub ctx_y: Vec<f64>,
    pub style: StyleInput,
    pub spec: AcqSpec,
    /// Live input dimensions.
    pub dim: usize,
    /// Inference-time input warp in unit space, applied before padding.
    pub warp: Option<WarpParams>,
}

impl PfnAcquisition<'_> {
    fn prepare(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut raw = xs.to_owned();
        if let Some(warp) = &self.warp {
            for mut row in raw.rows_mut() {
                let warped = warp.apply_row(row.as_slice().unwrap());
                for (v, w) in row.iter_mut().zip(warped) {
                    *v = w;
                }
            }
        }
        crate::priors::pad_and_scale(&raw, self.model.config().capacity)
    }
}

impl AcquisitionModel for PfnAcquisition<'_> {
    fn evaluate(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.nrows());
        // Bounded chunks keep the attention score matrices small.
        for chunk in xs.axis_chunks_iter(ndarray::Axis(0), 1024) {
            let prepared = self.prepare(chunk)?;
            let dists = self.model.forward(
                self.ctx_features.view(),
                &self.ctx_y,
                prepared.view(),
                &self.style,
            )?;
            out.extend(dists.iter().map(|d| self.spec.value(d)));
        }
        Ok(out)
    }

    fn evaluate_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let one = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::Domain(e.to_string()))?;
        let prepared = self.prepare(one.view())?;
        let (value, grad_scaled) = self.model.grad_query(
            self.ctx_features.view(),
            &self.ctx_y,
            prepared.row(0).as_slice().unwrap(),
            &self.style,
            &self.spec,
        )?;
        let scale = self.model.config().capacity as f64 / self.dim as f64;
        let mut grad = Vec::with_capacity(self.dim);
        for j in 0..self.dim {
            let mut g = grad_scaled[j] * scale;
            if let Some(warp) = &self.warp {
                let (a, b) = warp.params[j];
                g *= kumaraswamy_dx(x[j], a, b);
            }
            grad.push(g);
        }
        Ok((value, grad))
    }
}

/// Exact-GP expected improvement as an acquisition surface.
pub struct GpEiAcquisition {
    pub gp: GpPosterior,
    pub f_star: f64,
}

impl AcquisitionModel for GpEiAcquisition {
    fn evaluate(&self, xs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(xs
            .rows()
            .into_iter()
            .map(|row| {
                let (mean, var) = self.gp.predict(row.as_slice().unwrap());
                gaussian_ei(mean, var, self.f_star)
            })
            .collect())
    }
}

/// Proposal budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposeConfig {
    /// Random candidates drawn over the unit cube.
    pub num_candidates: usize,
    /// Candidates kept for gradient refinement.
    pub top_k: usize,
    pub refine_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            num_candidates: 10_000,
            top_k: 100,
            refine_iters: 30,
            grad_tol: 1e-6,
        }
    }
}

/// Projected quasi-Newton ascent in the unit box with backtracking, so the
/// refined value never falls below the starting value.
fn refine(
    acq: &dyn AcquisitionModel,
    start: &[f64],
    start_value: f64,
    cfg: &ProposeConfig,
) -> Result<(Vec<f64>, f64)> {
    const MEMORY: usize = 5;
    let mut x = start.to_vec();
    let mut value = start_value;
    let (_, mut grad) = acq.evaluate_grad(&x)?;
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    for _ in 0..cfg.refine_iters {
        // Projected gradient norm decides convergence at the box faces.
        let proj_norm: f64 = grad
            .iter()
            .zip(x.iter())
            .map(|(g, xi)| {
                let blocked = (*xi <= 0.0 && *g < 0.0) || (*xi >= 1.0 && *g > 0.0);
                if blocked {
                    0.0
                } else {
                    g * g
                }
            })
            .sum::<f64>()
            .sqrt();
        if proj_norm < cfg.grad_tol {
            break;
        }

        // Two-loop recursion for an approximate Newton direction (ascent).
        let mut dir = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y) in history.iter().rev() {
            let sy: f64 = s.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-12 {
                alphas.push(0.0);
                continue;
            }
            let alpha = s.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>() / sy;
            alphas.push(alpha);
            for (q, yi) in dir.iter_mut().zip(y.iter()) {
                *q -= alpha * yi;
            }
        }
        if let Some((s, y)) = history.last() {
            let sy: f64 = s.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            if sy > 0.0 && yy > 0.0 {
                let gamma = sy / yy;
                dir.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y), alpha) in history.iter().zip(alphas.iter().rev()) {
            let sy: f64 = s.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            if sy.abs() < 1e-12 {
                continue;
            }
            let beta = y.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (q, si) in dir.iter_mut().zip(s.iter()) {
                *q += (alpha - beta) * si;
            }
        }
        if dir.iter().zip(grad.iter()).map(|(a, b)| a * b).sum::<f64>() <= 0.0 {
            dir.copy_from_slice(&grad);
        }

        // Backtracking over the projected step; only improvements accepted.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let candidate: Vec<f64> = x
                .iter()
                .zip(dir.iter())
                .map(|(xi, di)| (xi + step * di).clamp(0.0, 1.0))
                .collect();
            if candidate == x {
                break;
            }
            let (v, g) = acq.evaluate_grad(&candidate)?;
            if v > value {
                accepted = Some((candidate, v, g));
                break;
            }
            step *= 0.5;
        }
        let Some((new_x, new_value, new_grad)) = accepted else {
            break;
        };
        let s: Vec<f64> = new_x.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        // Ascent flips the usual curvature pair sign convention.
        let y: Vec<f64> = grad
            .iter()
            .zip(new_grad.iter())
            .map(|(old, new)| old - new)
            .collect();
        if history.len() == MEMORY {
            history.remove(0);
        }
        history.push((s, y));
        x = new_x;
        value = new_value;
        grad = new_grad;
    }
    Ok((x, value))
}

/// Picks the next point to evaluate.
///
/// In pool mode every not-yet-evaluated pool row is scored and the argmax
/// returned. In continuous mode random candidates plus the observed points
/// are scored, the strongest are refined by gradient ascent, and the best
/// refined point is returned after integer rounding and deduplication.
pub fn propose(
    acq: &dyn AcquisitionModel,
    space: &SearchSpace,
    evaluated: &[Vec<f64>],
    cfg: &ProposeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    space.validate()?;
    let bounds = space.bounds();
    let d = space.dim();

    if let Some(pool) = &space.pool {
        let mut best: Option<(usize, f64)> = None;
        let unit = pool_to_unit(pool, &bounds);
        let values = acq.evaluate(unit.view())?;
        for (i, v) in values.iter().enumerate() {
            let row: Vec<f64> = pool.row(i).to_vec();
            if evaluated.iter().any(|e| e == &row) {
                continue;
            }
            if best.is_none_or(|(_, bv)| *v > bv) {
                best = Some((i, *v));
            }
        }
        let (idx, _) = best.ok_or(Error::ExhaustedSpace)?;
        return Ok(pool.row(idx).to_vec());
    }

    // Random candidates plus the observed points as refinement seeds.
    let mut candidates = Array2::zeros((cfg.num_candidates + evaluated.len(), d));
    for i in 0..cfg.num_candidates {
        for j in 0..d {
            candidates[[i, j]] = rng.gen::<f64>();
        }
    }
    for (i, e) in evaluated.iter().enumerate() {
        let (unit, _) = crate::transforms::to_unit_cube(&bounds, e);
        for j in 0..d {
            candidates[[cfg.num_candidates + i, j]] = unit[j];
        }
    }
    let values = acq.evaluate(candidates.view())?;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap());
    let (top, rest) = order.split_at(cfg.top_k.min(order.len()));

    let mut refined: Vec<(Vec<f64>, f64)> = Vec::with_capacity(top.len());
    for idx in top {
        let start: Vec<f64> = candidates.row(*idx).to_vec();
        refined.push(refine(acq, &start, values[*idx], cfg)?);
    }
    refined.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());

    // Unrefined candidates back the refined set up in value order, in case
    // every refined point collides with an already evaluated one.
    let fallback = rest.iter().map(|idx| {
        (
            candidates.row(*idx).to_vec(),
            values[*idx],
        )
    });
    for (unit, _) in refined.into_iter().chain(fallback) {
        let raw = round_to_space(&unit, space, rng);
        if !evaluated.iter().any(|e| e == &raw) {
            return Ok(raw);
        }
    }
    Err(Error::ExhaustedSpace)
}

fn pool_to_unit(pool: &Array2<f64>, bounds: &[(f64, f64)]) -> Array2<f64> {
    let mut unit = pool.clone();
    for mut row in unit.rows_mut() {
        let (u, _) = crate::transforms::to_unit_cube(bounds, row.as_slice().unwrap());
        for (v, w) in row.iter_mut().zip(u) {
            *v = w;
        }
    }
    unit
}

fn round_to_space(unit: &[f64], space: &SearchSpace, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bounds = space.bounds();
    let raw = crate::transforms::from_unit_cube(&bounds, unit);
    raw.iter()
        .zip(space.dims.iter())
        .map(|(v, dim)| match dim {
            DimKind::Continuous { .. } => *v,
            DimKind::Integer { lo, hi } => {
                (probabilistic_round(*v, rng).clamp(*lo, *hi)) as f64
            }
            DimKind::Boolean => probabilistic_round(*v, rng).clamp(0, 1) as f64,
        })
        .collect()
}
