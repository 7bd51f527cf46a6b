//! Learned non-myopic acquisition. A mean-distribution head models where the
//! predictive mean lands for a random query; its upper 0.999 quantile stands
//! in for the best reachable mean. A lookahead head is then trained to
//! predict that quantile after one more observation, which turns the
//! knowledge gradient into a single forward pass. A Monte-Carlo oracle over
//! an exact GP provides the independent reference.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::oracle::{GpPosterior, KernelSpec};
use crate::pfn::{
    train_steps, BatchProvider, HeadMode, PfnModel, StyleInput, StyleVocab, TrainItem,
    TrainReport,
};
use crate::priors::{sample_training_batch, BatchConfig};
use crate::riemann::RiemannDistribution;

/// Upper 0.999 quantile, the statistic standing in for the maximal mean.
pub fn tau_quantile(dist: &RiemannDistribution) -> Result<f64> {
    dist.icdf(0.999)
}

/// Best-reachable-mean estimate for a context, via the mean-distribution
/// head. Context features must be preprocessed.
pub fn tau(model: &PfnModel, ctx_features: &Array2<f64>, ctx_y: &[f64]) -> Result<f64> {
    let dist = mean_distribution(model, ctx_features, ctx_y)?;
    tau_quantile(&dist)
}

/// One x-free query in mean mode.
pub fn mean_distribution(
    model: &PfnModel,
    ctx_features: &Array2<f64>,
    ctx_y: &[f64],
) -> Result<RiemannDistribution> {
    if model.config().style != StyleVocab::Mode {
        return Err(Error::Config(
            "mean head requires the mode style vocabulary".into(),
        ));
    }
    let query = Array2::zeros((1, model.config().capacity));
    let dists = model.forward(
        ctx_features.view(),
        ctx_y,
        query.view(),
        &StyleInput::Mode(HeadMode::Mean),
    )?;
    Ok(dists.into_iter().next().unwrap())
}

/// Learned knowledge-gradient value at one preprocessed query point.
pub fn learned_kg(
    model: &PfnModel,
    ctx_features: &Array2<f64>,
    ctx_y: &[f64],
    query: &Array2<f64>,
) -> Result<f64> {
    let dists = model.forward(
        ctx_features.view(),
        ctx_y,
        query.view(),
        &StyleInput::Mode(HeadMode::Lookahead),
    )?;
    Ok(dists[0].mean() - tau(model, ctx_features, ctx_y)?)
}

/// Training stream mixing the plain predictive objective with mean-head
/// targets produced by a frozen snapshot, so earlier capabilities survive
/// the later phases.
pub struct MeanHeadProvider {
    pub batch: BatchConfig,
    pub frozen: PfnModel,
    /// Mean targets drawn per dataset.
    pub queries_per_dataset: usize,
    /// Fraction of items kept on the plain objective.
    pub plain_fraction: f64,
}

impl MeanHeadProvider {
    /// Mean target for a context at a query, through the frozen snapshot.
    pub fn mean_target(
        frozen: &PfnModel,
        features: &Array2<f64>,
        y: &[f64],
        query: &Array2<f64>,
    ) -> Result<f64> {
        let dists = frozen.forward(
            features.view(),
            y,
            query.view(),
            &StyleInput::Mode(HeadMode::Plain),
        )?;
        Ok(dists[0].mean())
    }
}

impl BatchProvider for MeanHeadProvider {
    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>> {
        let raw = sample_training_batch(&self.batch, batch_size, rng)?;
        let mut items = Vec::with_capacity(batch_size);
        for item in &raw {
            let keep_plain = rng.gen::<f64>() < self.plain_fraction;
            let mut base = TrainItem::from_batch_item(item, StyleVocab::Mode)?;
            if keep_plain {
                items.push(base);
                continue;
            }
            let k = self.frozen.config().capacity;
            let scale = k as f64 / item.dim as f64;
            let mut targets = Vec::with_capacity(self.queries_per_dataset);
            for _ in 0..self.queries_per_dataset {
                let mut q = Array2::zeros((1, k));
                for j in 0..item.dim {
                    q[[0, j]] = rng.gen::<f64>() * scale;
                }
                targets.push(Self::mean_target(
                    &self.frozen,
                    &base.features,
                    &base.y_context,
                    &q,
                )?);
            }
            base.queries = Array2::zeros((1, k));
            base.targets = targets;
            base.style = StyleInput::Mode(HeadMode::Mean);
            items.push(base);
        }
        Ok(items)
    }
}

/// Training stream for the lookahead head: the target is the frozen mean
/// head's 0.999 quantile after the candidate observation joins the context.
pub struct LookaheadProvider {
    pub batch: BatchConfig,
    pub frozen: PfnModel,
    /// Fractions of items kept on the plain and mean objectives; the rest
    /// trains the lookahead head.
    pub plain_fraction: f64,
    pub mean_fraction: f64,
}

impl BatchProvider for LookaheadProvider {
    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>> {
        let raw = sample_training_batch(&self.batch, batch_size, rng)?;
        let mut items = Vec::with_capacity(batch_size);
        for item in &raw {
            let u = rng.gen::<f64>();
            let mut base = TrainItem::from_batch_item(item, StyleVocab::Mode)?;
            if u < self.plain_fraction {
                items.push(base);
                continue;
            }
            let k = self.frozen.config().capacity;
            let scale = k as f64 / item.dim as f64;
            if u < self.plain_fraction + self.mean_fraction {
                let mut q = Array2::zeros((1, k));
                for j in 0..item.dim {
                    q[[0, j]] = rng.gen::<f64>() * scale;
                }
                let target = MeanHeadProvider::mean_target(
                    &self.frozen,
                    &base.features,
                    &base.y_context,
                    &q,
                )?;
                base.queries = Array2::zeros((1, k));
                base.targets = vec![target];
                base.style = StyleInput::Mode(HeadMode::Mean);
                items.push(base);
                continue;
            }

            // Candidate observation: the first held-out point.
            let n_ctx = base.y_context.len();
            let candidate_x = base.queries.row(0).to_owned();
            let candidate_y = base.targets[0];
            let mut joined = Array2::zeros((n_ctx + 1, k));
            joined
                .slice_mut(ndarray::s![..n_ctx, ..])
                .assign(&base.features);
            joined.row_mut(n_ctx).assign(&candidate_x);
            let mut joined_y = base.y_context.clone();
            joined_y.push(candidate_y);
            let dist = mean_distribution(&self.frozen, &joined, &joined_y)?;
            let target = tau_quantile(&dist)?;

            base.queries = candidate_x.insert_axis(ndarray::Axis(0)).to_owned();
            base.targets = vec![target];
            base.style = StyleInput::Mode(HeadMode::Lookahead);
            items.push(base);
        }
        Ok(items)
    }
}

/// Trains the mean-distribution head on top of a plain-trained model. The
/// snapshot taken at entry provides the targets.
pub fn train_mean_head(
    model: &mut PfnModel,
    batch: BatchConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainReport> {
    let provider = MeanHeadProvider {
        batch,
        frozen: model.clone(),
        queries_per_dataset: 4,
        plain_fraction: 0.5,
    };
    train_steps(model, &provider, steps, seed, None)
}

/// Trains the lookahead head; the snapshot taken at entry (which must
/// already carry a mean head) provides the quantile targets.
pub fn train_kg_head(
    model: &mut PfnModel,
    batch: BatchConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainReport> {
    let provider = LookaheadProvider {
        batch,
        frozen: model.clone(),
        plain_fraction: 0.34,
        mean_fraction: 0.33,
    };
    train_steps(model, &provider, steps, seed, None)
}

/// Monte-Carlo knowledge gradient against an exact GP: sample `n_outer`
/// outcomes at the candidate, and judge each by the best posterior mean over
/// `m_locations` shared random locations plus all observed points.
pub fn mc_kg_oracle(
    kernel: &KernelSpec,
    xs: &[Vec<f64>],
    ys: &[f64],
    candidate: &[f64],
    n_outer: usize,
    m_locations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let d = candidate.len();
    let mut locations: Vec<Vec<f64>> = (0..m_locations)
        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
        .collect();
    locations.extend(xs.iter().cloned());
    locations.push(candidate.to_vec());

    let best_mean = |gp: &GpPosterior| -> f64 {
        locations
            .iter()
            .map(|loc| gp.predict(loc).0)
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let gp = GpPosterior::fit(kernel.clone(), xs, ys)?;
    let tau_now = best_mean(&gp);
    let (mean, var) = gp.predict(candidate);
    let obs_std = (var + kernel.noise()).max(0.0).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut diffs = Vec::with_capacity(n_outer);
    let mut xs_next = xs.to_vec();
    xs_next.push(candidate.to_vec());
    for _ in 0..n_outer {
        let y = mean + obs_std * normal.sample(rng);
        let mut ys_next = ys.to_vec();
        ys_next.push(y);
        let gp_next = GpPosterior::fit(kernel.clone(), &xs_next, &ys_next)?;
        diffs.push(best_mean(&gp_next) - tau_now);
    }
    let n = diffs.len() as f64;
    let estimate = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((estimate, (var / n).sqrt()))
}

/// Per-iteration acquisition choice for the mixture policy; `true` selects
/// the lookahead head.
pub fn ei_kg_policy(kg_probability: f64, rng: &mut ChaCha8Rng) -> bool {
    rng.gen::<f64>() < kg_probability
}
