//! Prior-fitting: stochastic gradient training of the surrogate on synthetic
//! datasets, minimizing cross-entropy of held-out outputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{PfnConfig, PfnModel, StyleInput, StyleVocab};
use crate::error::{Error, Result};
use crate::priors::{sample_training_batch, BatchConfig, BatchItem};
use crate::riemann::BucketLayout;
use crate::tensor::{cosine_schedule, Adam};

/// Datasets per gradient-worker chunk. Fixed so the merge order, and with it
/// the result, does not depend on the thread count.
const CHUNK: usize = 8;

/// One dataset prepared for a gradient step: a context, query inputs and the
/// output values whose log-density is maximized.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Array2<f64>,
    pub y_context: Vec<f64>,
    pub queries: Array2<f64>,
    pub targets: Vec<f64>,
    pub style: StyleInput,
}

impl TrainItem {
    /// Splits a sampled dataset into context and held-out queries.
    pub fn from_batch_item(item: &BatchItem, vocab: StyleVocab) -> Result<Self> {
        let n = item.y.len();
        let split = item.split.min(n);
        let (queries, targets) = if split == n {
            // Nothing held out; re-query the last context point.
            (
                item.features.slice(ndarray::s![n - 1..n, ..]).to_owned(),
                vec![item.y[n - 1]],
            )
        } else {
            (
                item.features.slice(ndarray::s![split.., ..]).to_owned(),
                item.y[split..].to_vec(),
            )
        };
        let style = match (vocab, &item.user_prior) {
            (StyleVocab::None, _) => StyleInput::None,
            (StyleVocab::UserPrior, Some(spec)) => StyleInput::UserPrior(spec.clone()),
            (StyleVocab::UserPrior, None) => {
                StyleInput::UserPrior(crate::priors::UserPriorSpec::none(item.dim))
            }
            (StyleVocab::Mode, _) => StyleInput::Mode(super::HeadMode::Plain),
        };
        Ok(Self {
            features: item.features.slice(ndarray::s![..split, ..]).to_owned(),
            y_context: item.y[..split].to_vec(),
            queries,
            targets,
            style,
        })
    }
}

/// Source of training batches.
pub trait BatchProvider: Sync {
    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>>;
}

/// Streams datasets straight from a prior.
pub struct PlainPriorProvider {
    pub batch: BatchConfig,
    pub vocab: StyleVocab,
}

impl PlainPriorProvider {
    pub fn new(batch: BatchConfig, vocab: StyleVocab) -> Self {
        Self { batch, vocab }
    }
}

impl BatchProvider for PlainPriorProvider {
    fn sample(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainItem>> {
        let raw = sample_training_batch(&self.batch, batch_size, rng)?;
        raw.iter()
            .map(|item| TrainItem::from_batch_item(item, self.vocab))
            .collect()
    }
}

/// Log density of a class-conditional slice of the output distribution at a
/// point; turns bucket-level cross-entropy into a proper density loss.
fn log_density_in_class(layout: &BucketLayout, y: f64, class: usize) -> f64 {
    let sqrt_2_over_pi = 0.797_884_560_802_865_4_f64;
    if class == 0 {
        let z = layout.support_min() - y;
        let s = layout.tail_scale_left();
        (sqrt_2_over_pi / s).ln() - z.max(0.0).powi(2) / (2.0 * s * s)
    } else if class == layout.num_classes() - 1 {
        let z = y - layout.support_max();
        let s = layout.tail_scale_right();
        (sqrt_2_over_pi / s).ln() - z.max(0.0).powi(2) / (2.0 * s * s)
    } else {
        -layout.bucket_width(class - 1).ln()
    }
}

/// Per-item loss pieces: bucket-level cross-entropy sum, full negative log
/// density sum, and the number of targets.
struct ItemLoss {
    ce: f64,
    nll: f64,
    count: usize,
}

fn item_gradients(
    model: &PfnModel,
    item: &TrainItem,
    param_grads: &mut [f64],
) -> Result<ItemLoss> {
    let mut tape = crate::tensor::Tape::new(model.params());
    let pass = model.build_forward(
        &mut tape,
        item.features.view(),
        &item.y_context,
        item.queries.view(),
        &item.style,
    )?;
    let logits = tape.value(pass.logits).to_owned();
    let layout = model.layout();
    let classes = logits.ncols();
    let mut seed = Array2::zeros(logits.raw_dim());
    let mut ce = 0.0;
    let mut nll = 0.0;
    for (r, target) in item.targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut probs: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        let class = layout.class_of(*target);
        let log_p = if probs[class].is_finite() {
            probs[class].max(1e-300).ln()
        } else {
            f64::NAN
        };
        ce -= log_p;
        nll -= log_p + log_density_in_class(layout, *target, class);
        for c in 0..classes {
            seed[[r, c]] = probs[c] - f64::from(c == class);
        }
    }
    tape.backward(pass.logits, seed, param_grads);
    Ok(ItemLoss {
        ce,
        nll,
        count: item.targets.len(),
    })
}

/// Mean negative log predictive density over all held-out points of a batch.
pub fn loss_on_batch(model: &PfnModel, items: &[TrainItem]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for item in items {
        let dists = model.forward(
            item.features.view(),
            &item.y_context,
            item.queries.view(),
            &item.style,
        )?;
        for (dist, target) in dists.iter().zip(item.targets.iter()) {
            total -= dist.log_prob(*target);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Domain("batch has no held-out points".into()));
    }
    Ok(total / count as f64)
}

/// Mean negative log density of the equal-mass prior-marginal predictor, the
/// baseline any trained model must beat.
pub fn marginal_nll(layout: &BucketLayout, targets: &[f64]) -> f64 {
    let classes = layout.num_classes();
    let mut total = 0.0;
    for y in targets {
        let class = layout.class_of(*y);
        total += (classes as f64).ln() - log_density_in_class(layout, *y, class);
    }
    total / targets.len() as f64
}

/// Progress of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Bucket-level cross-entropy per step.
    pub ce: Vec<f64>,
    /// Full negative log density per step.
    pub nll: Vec<f64>,
}

impl TrainReport {
    pub fn final_ce(&self) -> f64 {
        self.ce.last().copied().unwrap_or(f64::NAN)
    }

    /// Mean cross-entropy over the last `window` steps.
    pub fn tail_mean_ce(&self, window: usize) -> f64 {
        let n = self.ce.len();
        let from = n.saturating_sub(window);
        let slice = &self.ce[from..];
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Runs `steps` gradient steps on an existing model. The step-size schedule
/// anneals over exactly this span.
pub fn train_steps(
    model: &mut PfnModel,
    provider: &dyn BatchProvider,
    steps: usize,
    seed: u64,
    mut sink: Option<&mut dyn FnMut(&PfnModel, usize) -> Result<()>>,
) -> Result<TrainReport> {
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.params().len());
    let warmup = ((steps as f64 * cfg.warmup_frac) as usize).max(1);
    let mut report = TrainReport::default();

    for step in 0..steps {
        let batch = provider.sample(cfg.batch_size, &mut rng)?;
        let chunks: Vec<&[TrainItem]> = batch.chunks(CHUNK).collect();
        let partials: Vec<Result<(Vec<f64>, f64, f64, usize)>> = chunks
            .par_iter()
            .map(|chunk| {
                let mut grads = vec![0.0; model.params().len()];
                let mut ce = 0.0;
                let mut nll = 0.0;
                let mut count = 0usize;
                for item in *chunk {
                    let loss = item_gradients(model, item, &mut grads)?;
                    ce += loss.ce;
                    nll += loss.nll;
                    count += loss.count;
                }
                Ok((grads, ce, nll, count))
            })
            .collect();

        let mut grads = vec![0.0; model.params().len()];
        let mut ce = 0.0;
        let mut nll = 0.0;
        let mut count = 0usize;
        for partial in partials {
            let (g, c, n, k) = partial?;
            for (acc, v) in grads.iter_mut().zip(g.iter()) {
                *acc += v;
            }
            ce += c;
            nll += n;
            count += k;
        }
        let scale = 1.0 / count.max(1) as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        let step_ce = ce * scale;
        let step_nll = nll * scale;
        if !step_ce.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {step_ce} (nll {step_nll})"),
            });
        }

        let lr = cosine_schedule(cfg.step_size, step, steps, warmup);
        adam.step(model.params_mut().values_mut(), &grads, lr);
        model.params_mut().quantize_to_f32();
        report.ce.push(step_ce);
        report.nll.push(step_nll);

        if let Some(sink) = sink.as_mut() {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                sink(model, step + 1)?;
            }
        }
    }
    model.add_trained_steps(steps as u64);
    Ok(report)
}

/// Trains a fresh model from a prior stream.
pub fn train(
    provider: &dyn BatchProvider,
    layout: BucketLayout,
    config: PfnConfig,
    seed: u64,
    sink: Option<&mut dyn FnMut(&PfnModel, usize) -> Result<()>>,
) -> Result<(PfnModel, TrainReport)> {
    let total = config.total_steps;
    let mut model = PfnModel::new(config, layout, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let report = train_steps(&mut model, provider, total, seed, sink)?;
    Ok((model, report))
}

/// Draws marginal prior outputs and builds the equal-mass bucket layout a
/// model will use. Dataset shapes mirror the training stream.
pub fn build_layout_from_prior(
    batch: &BatchConfig,
    num_buckets: usize,
    samples: usize,
    seed: u64,
) -> Result<BucketLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outputs = Vec::with_capacity(samples);
    let sampler = batch.prior.sampler();
    while outputs.len() < samples {
        let n = rng.gen_range(batch.min_points..=batch.max_points).min(16);
        let d = rng.gen_range(1..=batch.max_dim);
        let ds = sampler.sample(n, d, &mut rng)?;
        outputs.extend(ds.y);
    }
    outputs.truncate(samples);
    crate::riemann::build_borders(&outputs, num_buckets + 2)
}
