//! Inference-time data transforms: monotone per-feature input warping, an
//! output power transform, and unit-hypercube scaling of the search space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kumaraswamy CDF `1 - (1 - x^a)^b`, a monotone bijection of `[0, 1]`.
///
/// Identity at `a = b = 1`. Inputs are clamped against tiny floating drift;
/// use [`try_kumaraswamy`] when the domain must be enforced.
pub fn kumaraswamy(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&x), "x = {x} outside [0,1]");
    let x = x.clamp(0.0, 1.0);
    if a == 1.0 && b == 1.0 {
        return x;
    }
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    // ln(1 - x^a), with the accurate branch picked by the size of x^a.
    let la = a * x.ln();
    let xa = la.exp();
    let ln_one_minus_xa = if xa <= 0.5 {
        f64::ln_1p(-xa)
    } else {
        let one_minus_xa = -f64::exp_m1(la);
        if one_minus_xa <= 0.0 {
            return 1.0;
        }
        one_minus_xa.ln()
    };
    (-f64::exp_m1(b * ln_one_minus_xa)).clamp(0.0, 1.0)
}

/// Domain-checked variant of [`kumaraswamy`].
pub fn try_kumaraswamy(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("warp input {x} outside [0, 1]")));
    }
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Domain("warp parameters must be positive".into()));
    }
    Ok(kumaraswamy(x, a, b))
}

/// Exact inverse of [`kumaraswamy`].
pub fn kumaraswamy_inv(w: f64, a: f64, b: f64) -> f64 {
    let w = w.clamp(0.0, 1.0);
    if a == 1.0 && b == 1.0 {
        return w;
    }
    if w == 0.0 {
        return 0.0;
    }
    if w == 1.0 {
        return 1.0;
    }
    // u = ln(1 - w) / b, then x = (1 - e^u)^(1/a), branching as above.
    let u = if w <= 0.5 {
        f64::ln_1p(-w) / b
    } else {
        (1.0 - w).ln() / b
    };
    let root = u.exp();
    let ln_one_minus_root = if root <= 0.5 {
        f64::ln_1p(-root)
    } else {
        let one_minus_root = -f64::exp_m1(u);
        if one_minus_root <= 0.0 {
            return 0.0;
        }
        one_minus_root.ln()
    };
    (ln_one_minus_root / a).exp().clamp(0.0, 1.0)
}

/// Derivative of the warp with respect to its input,
/// `a b x^(a-1) (1 - x^a)^(b-1)`, clamped away from the endpoint
/// singularities so gradient chains stay finite.
pub fn kumaraswamy_dx(x: f64, a: f64, b: f64) -> f64 {
    let x = x.clamp(1e-12, 1.0 - 1e-12);
    let xa = x.powf(a);
    a * b * x.powf(a - 1.0) * (1.0 - xa).max(1e-300).powf(b - 1.0)
}

/// Partial derivatives of the warp with respect to `a` and `b`.
pub fn kumaraswamy_param_grad(x: f64, a: f64, b: f64) -> (f64, f64) {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.0 || x >= 1.0 {
        return (0.0, 0.0);
    }
    let xa = x.powf(a);
    let inner = (1.0 - xa).max(1e-300);
    let d_a = b * inner.powf(b - 1.0) * xa * x.ln() * -1.0;
    let d_b = -inner.powf(b) * inner.ln();
    (-d_a, d_b)
}

/// Per-feature warp parameters; identity at `a = b = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub params: Vec<(f64, f64)>,
}

impl WarpParams {
    pub fn identity(d: usize) -> Self {
        Self {
            params: vec![(1.0, 1.0); d],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.params.iter().all(|(a, b)| *a == 1.0 && *b == 1.0)
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.params.iter())
            .map(|(v, (a, b))| kumaraswamy(*v, *a, *b))
            .collect()
    }

    pub fn invert_row(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(self.params.iter())
            .map(|(v, (a, b))| kumaraswamy_inv(*v, *a, *b))
            .collect()
    }
}

fn yeo_johnson(y: f64, lambda: f64) -> f64 {
    if y >= 0.0 {
        if lambda.abs() < 1e-12 {
            (y + 1.0).ln()
        } else {
            ((y + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(1.0 - y).ln()
    } else {
        -((1.0 - y).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

fn yeo_johnson_inv(z: f64, lambda: f64) -> f64 {
    if z >= 0.0 {
        if lambda.abs() < 1e-12 {
            z.exp() - 1.0
        } else {
            (z * lambda + 1.0).max(0.0).powf(1.0 / lambda) - 1.0
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        1.0 - (-z).exp()
    } else {
        1.0 - (1.0 - (2.0 - lambda) * z).max(0.0).powf(1.0 / (2.0 - lambda))
    }
}

/// Profile log-likelihood of the power-transform parameter.
fn yj_log_likelihood(y: &[f64], lambda: f64) -> f64 {
    let n = y.len() as f64;
    let transformed: Vec<f64> = y.iter().map(|v| yeo_johnson(*v, lambda)).collect();
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = y
        .iter()
        .map(|v| v.signum() * (v.abs() + 1.0).ln())
        .sum::<f64>();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// A fitted power transform followed by standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputTransform {
    pub lambda: f64,
    pub shift: f64,
    pub scale: f64,
    /// Set when the observations had no spread and the transform degenerated
    /// to the identity.
    pub degenerate: bool,
}

impl OutputTransform {
    /// Fits the power-transform parameter by golden-section search on the
    /// profile likelihood over `[-2, 2]`, then standardizes.
    pub fn fit(y: &[f64]) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Domain("need at least 2 observations".into()));
        }
        let spread = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            });
        if spread.1 - spread.0 <= 0.0 {
            return Ok(Self {
                lambda: 1.0,
                shift: y[0],
                scale: 1.0,
                degenerate: true,
            });
        }

        let (mut lo, mut hi) = (-2.0f64, 2.0f64);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - phi * (hi - lo);
        let mut d = lo + phi * (hi - lo);
        let mut fc = yj_log_likelihood(y, c);
        let mut fd = yj_log_likelihood(y, d);
        for _ in 0..60 {
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - phi * (hi - lo);
                fc = yj_log_likelihood(y, c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + phi * (hi - lo);
                fd = yj_log_likelihood(y, d);
            }
        }
        let lambda = 0.5 * (lo + hi);

        let transformed: Vec<f64> = y.iter().map(|v| yeo_johnson(*v, lambda)).collect();
        let n = transformed.len() as f64;
        let mean = transformed.iter().sum::<f64>() / n;
        let var = transformed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            lambda,
            shift: mean,
            scale: var.sqrt().max(1e-12),
            degenerate: false,
        })
    }

    pub fn identity() -> Self {
        Self {
            lambda: 1.0,
            shift: 0.0,
            scale: 1.0,
            degenerate: false,
        }
    }

    pub fn apply(&self, y: f64) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        (yeo_johnson(y, self.lambda) - self.shift) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        if self.degenerate {
            return self.shift;
        }
        yeo_johnson_inv(z * self.scale + self.shift, self.lambda)
    }
}

/// Budgets for the re-evaluation-likelihood warp fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Bound on `log a` and `log b`.
    pub bound: f64,
}

impl Default for WarpFitConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            steps: 50,
            step_size: 0.1,
            bound: 4.0,
        }
    }
}

/// Outcome of [`fit_warp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpFitStatus {
    Fitted,
    /// Optimization failed to beat the identity; the identity is returned.
    IdentityFallback,
}

/// Re-evaluation log-likelihood of warped inputs: every observation is warped
/// and re-queried against the warped history, and the per-point log densities
/// are summed.
pub fn warp_objective(
    model: &crate::pfn::PfnModel,
    x_unit: &ndarray::Array2<f64>,
    y: &[f64],
    params: &WarpParams,
) -> Result<f64> {
    let (value, _) = warp_objective_grad(model, x_unit, y, params, false)?;
    Ok(value)
}

/// Objective plus, optionally, its gradient with respect to
/// `(log a_j, log b_j)` per feature.
fn warp_objective_grad(
    model: &crate::pfn::PfnModel,
    x_unit: &ndarray::Array2<f64>,
    y: &[f64],
    params: &WarpParams,
    with_grad: bool,
) -> Result<(f64, Vec<(f64, f64)>)> {
    use crate::pfn::StyleInput;

    let n = x_unit.nrows();
    let d = x_unit.ncols();
    let capacity = model.config().capacity;
    let scale = capacity as f64 / d as f64;

    let mut warped = x_unit.clone();
    for mut row in warped.rows_mut() {
        let w = params.apply_row(row.as_slice().unwrap());
        for (v, wv) in row.iter_mut().zip(w) {
            *v = wv;
        }
    }
    let prepared = crate::priors::pad_and_scale(&warped, capacity)?;

    let mut tape = crate::tensor::Tape::new(model.params());
    let pass = model.build_forward(
        &mut tape,
        prepared.view(),
        y,
        prepared.view(),
        &StyleInput::None,
    )?;
    let logits = tape.value(pass.logits).to_owned();
    let layout = model.layout();

    let mut objective = 0.0;
    let mut seed = ndarray::Array2::zeros(logits.raw_dim());
    for (r, target) in y.iter().enumerate() {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut probs: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        let class = layout.class_of(*target);
        objective += probs[class].max(1e-300).ln();
        if with_grad {
            for c in 0..probs.len() {
                seed[[r, c]] = f64::from(c == class) - probs[c];
            }
        }
    }

    if !with_grad {
        return Ok((objective, Vec::new()));
    }

    let mut param_grads = vec![0.0; model.params().len()];
    let node_grads = tape.backward(pass.logits, seed, &mut param_grads);
    let input_grad = node_grads[pass.input.index()].as_ref().expect("input grad");

    // The warped value of observation i feeds both its context row and its
    // query row; both gradients chain back to the warp parameters.
    let mut grads = vec![(0.0, 0.0); d];
    for i in 0..n {
        for j in 0..d {
            let dw = (input_grad[[i, j]] + input_grad[[n + i, j]]) * scale;
            let (a, b) = params.params[j];
            let (da, db) = kumaraswamy_param_grad(x_unit[[i, j]], a, b);
            grads[j].0 += dw * da;
            grads[j].1 += dw * db;
        }
    }
    Ok((objective, grads))
}

/// Fits per-feature warp parameters by maximizing the re-evaluation
/// likelihood through the model, with multi-restart Adam ascent in
/// log-parameter space. Never returns parameters worse than the identity.
pub fn fit_warp(
    model: &crate::pfn::PfnModel,
    x_unit: &ndarray::Array2<f64>,
    y: &[f64],
    cfg: &WarpFitConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(WarpParams, WarpFitStatus)> {
    use rand::Rng;

    if x_unit.nrows() == 0 {
        return Err(Error::Domain("empty history".into()));
    }
    let d = x_unit.ncols();
    let identity = WarpParams::identity(d);
    let identity_value = warp_objective(model, x_unit, y, &identity)?;

    let mut best = (identity.clone(), identity_value);
    for restart in 0..cfg.restarts {
        let mut theta: Vec<f64> = if restart == 0 {
            vec![0.0; 2 * d]
        } else {
            (0..2 * d)
                .map(|_| rng.gen_range(-cfg.bound..cfg.bound))
                .collect()
        };
        let mut m = vec![0.0; 2 * d];
        let mut v = vec![0.0; 2 * d];
        let mut last = f64::NEG_INFINITY;
        let mut last_params = identity.clone();
        for step in 0..cfg.steps {
            let params = WarpParams {
                params: (0..d)
                    .map(|j| (theta[2 * j].exp(), theta[2 * j + 1].exp()))
                    .collect(),
            };
            let (value, grads) = warp_objective_grad(model, x_unit, y, &params, true)?;
            if value.is_finite() && value > last {
                last = value;
                last_params = params.clone();
            }
            let t = (step + 1) as f64;
            for j in 0..d {
                // Chain to log-space: d/d(log a) = a * d/da.
                let g = [
                    grads[j].0 * params.params[j].0,
                    grads[j].1 * params.params[j].1,
                ];
                for (k, gk) in g.iter().enumerate() {
                    let idx = 2 * j + k;
                    m[idx] = 0.9 * m[idx] + 0.1 * gk;
                    v[idx] = 0.999 * v[idx] + 0.001 * gk * gk;
                    let m_hat = m[idx] / (1.0 - 0.9f64.powf(t));
                    let v_hat = v[idx] / (1.0 - 0.999f64.powf(t));
                    theta[idx] += cfg.step_size * m_hat / (v_hat.sqrt() + 1e-8);
                    theta[idx] = theta[idx].clamp(-cfg.bound, cfg.bound);
                }
            }
        }
        if last > best.1 {
            best = (last_params, last);
        }
    }

    if best.1 > identity_value {
        Ok((best.0, WarpFitStatus::Fitted))
    } else {
        Ok((identity, WarpFitStatus::IdentityFallback))
    }
}

/// Affine map of a point into the unit hypercube given per-dimension bounds.
/// Degenerate dimensions are pinned to 0.5; the flag reports whether any were.
pub fn to_unit_cube(bounds: &[(f64, f64)], x: &[f64]) -> (Vec<f64>, bool) {
    let mut pinned = false;
    let mapped = bounds
        .iter()
        .zip(x.iter())
        .map(|((lo, hi), v)| {
            if hi <= lo {
                pinned = true;
                0.5
            } else {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        })
        .collect();
    (mapped, pinned)
}

/// Inverse of [`to_unit_cube`].
pub fn from_unit_cube(bounds: &[(f64, f64)], u: &[f64]) -> Vec<f64> {
    bounds
        .iter()
        .zip(u.iter())
        .map(|((lo, hi), v)| {
            if hi <= lo {
                *lo
            } else {
                lo + v * (hi - lo)
            }
        })
        .collect()
}
