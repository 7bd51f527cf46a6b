//! Samplers producing synthetic datasets from configurable priors. These feed
//! the prior-fitting training stream and the synthetic benchmarks.

mod bnn;
mod gp;
mod user;

pub use bnn::{sample_bnn_prior, BnnArchitecture, BnnPriorConfig};
pub use gp::{sample_hebo_prior, sample_simple_gp, HeboPriorConfig, SimpleGpConfig};
pub use user::{
    containing_intervals, interval_family, sample_interval, sample_user_prior_task, DimPrior,
    IntervalBase, UserPriorSpec, INTERVAL_COUNT,
};

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A synthetic supervised dataset with inputs in the unit hypercube.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != y.len() {
            return Err(Error::Domain("empty dataset or row mismatch".into()));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("inputs outside the unit hypercube".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite output".into()));
        }
        Ok(Self { x, y })
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

    /// Row index of the largest output.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.y.iter().enumerate() {
            if *v > self.y[best] {
                best = i;
            }
        }
        best
    }

    /// Writes `x_0..x_{d-1},y` rows for debugging.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        let d = self.dim();
        for j in 0..d {
            write!(out, "x_{j},")?;
        }
        writeln!(out, "y")?;
        for i in 0..self.len() {
            for j in 0..d {
                write!(out, "{},", self.x[[i, j]])?;
            }
            writeln!(out, "{}", self.y[i])?;
        }
        Ok(())
    }
}

/// Anything that can emit datasets of a requested shape.
pub trait DatasetSampler: Send + Sync {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset>;
}

impl<S: DatasetSampler + ?Sized> DatasetSampler for Box<S> {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        (**self).sample(n, d, rng)
    }
}

/// Per-feature monotone warp applied to inputs before they reach the function
/// generator, so the trained surrogate also covers misscaled features.
///
/// The warp is the Kumaraswamy CDF `1 - (1 - x^a)^b` with log-normal
/// parameters; at the mode of the parameter distribution it is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorWarpConfig {
    pub log_a_std: f64,
    pub log_b_std: f64,
}

impl Default for PriorWarpConfig {
    fn default() -> Self {
        Self {
            log_a_std: 0.976,
            log_b_std: 0.8003,
        }
    }
}

impl PriorWarpConfig {
    pub fn sample_params<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<(f64, f64)> {
        let na = Normal::new(0.0, self.log_a_std).expect("std > 0");
        let nb = Normal::new(0.0, self.log_b_std).expect("std > 0");
        (0..d)
            .map(|_| (na.sample(rng).exp(), nb.sample(rng).exp()))
            .collect()
    }
}

/// Applies sampled warp parameters to a feature matrix in place.
pub fn apply_prior_warp(x: &mut Array2<f64>, params: &[(f64, f64)]) {
    for (j, (a, b)) in params.iter().enumerate() {
        for v in x.column_mut(j) {
            *v = crate::transforms::kumaraswamy(*v, *a, *b);
        }
    }
}

/// The base function prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasePrior {
    SimpleGp(SimpleGpConfig),
    Hebo(HeboPriorConfig),
    Bnn(BnnPriorConfig),
}

/// Selects a base prior and its extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub base: BasePrior,
    /// Fraction of columns regenerated as pure noise, never fed to the
    /// generator. Zero disables the extension.
    #[serde(default)]
    pub spurious_fraction: f64,
    /// Warp inputs before they reach the generator.
    #[serde(default)]
    pub input_warp: Option<PriorWarpConfig>,
    /// Emit optimum-location side information with each dataset.
    #[serde(default)]
    pub user_prior: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::simple_gp()
    }
}

impl PriorConfig {
    pub fn simple_gp() -> Self {
        Self {
            base: BasePrior::SimpleGp(SimpleGpConfig::default()),
            spurious_fraction: 0.0,
            input_warp: None,
            user_prior: false,
        }
    }

    pub fn hebo() -> Self {
        Self {
            base: BasePrior::Hebo(HeboPriorConfig::default()),
            spurious_fraction: 0.0,
            input_warp: None,
            user_prior: false,
        }
    }

    pub fn bnn() -> Self {
        Self {
            base: BasePrior::Bnn(BnnPriorConfig::default()),
            spurious_fraction: 0.0,
            input_warp: None,
            user_prior: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.spurious_fraction) {
            return Err(Error::Config(format!(
                "spurious_fraction {} outside [0, 1)",
                self.spurious_fraction
            )));
        }
        Ok(())
    }

    fn base_sampler(&self) -> Box<dyn DatasetSampler> {
        let warp = self.input_warp;
        match &self.base {
            BasePrior::SimpleGp(cfg) => Box::new(gp::SimpleGpSampler {
                cfg: cfg.clone(),
                warp,
            }),
            BasePrior::Hebo(cfg) => Box::new(gp::HeboSampler {
                cfg: cfg.clone(),
                warp,
            }),
            BasePrior::Bnn(cfg) => Box::new(bnn::BnnSampler {
                cfg: cfg.clone(),
                warp,
            }),
        }
    }

    /// Sampler with the spurious-dimension wrapper applied.
    pub fn sampler(&self) -> Box<dyn DatasetSampler> {
        let base = self.base_sampler();
        if self.spurious_fraction > 0.0 {
            Box::new(SpuriousDims {
                inner: base,
                fraction: self.spurious_fraction,
            })
        } else {
            base
        }
    }
}

/// Wraps a sampler so a random subset of columns is pure uniform noise.
pub struct SpuriousDims<S> {
    inner: S,
    fraction: f64,
}

/// Wraps `sampler` so each emitted dataset designates `fraction * d` of its
/// columns (randomized rounding) as spurious noise columns.
pub fn add_spurious_dims<S: DatasetSampler>(sampler: S, fraction: f64) -> SpuriousDims<S> {
    SpuriousDims {
        inner: sampler,
        fraction,
    }
}

impl<S: DatasetSampler> SpuriousDims<S> {
    /// Samples a dataset and also reports which columns are spurious.
    pub fn sample_with_mask(
        &self,
        n: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Dataset, Vec<bool>)> {
        let count = probabilistic_round(self.fraction * d as f64, rng).min(d.saturating_sub(1));
        let mut mask = vec![false; d];
        // Sample `count` distinct columns.
        let mut chosen = 0;
        while chosen < count {
            let j = rng.gen_range(0..d);
            if !mask[j] {
                mask[j] = true;
                chosen += 1;
            }
        }
        // Independent streams so spurious values never perturb the generator.
        let mut inner_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.gen());

        let active = d - count;
        let inner = self.inner.sample(n, active.max(1), &mut inner_rng)?;
        let mut x = Array2::zeros((n, d));
        let mut src = 0;
        for j in 0..d {
            if mask[j] {
                for i in 0..n {
                    x[[i, j]] = noise_rng.gen::<f64>();
                }
            } else {
                for i in 0..n {
                    x[[i, j]] = inner.x[[i, src]];
                }
                src += 1;
            }
        }
        Ok((Dataset::new(x, inner.y)?, mask))
    }
}

impl<S: DatasetSampler> DatasetSampler for SpuriousDims<S> {
    fn sample(&self, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        self.sample_with_mask(n, d, rng).map(|(ds, _)| ds)
    }
}

/// Rounds to one of the two neighboring integers with probability equal to
/// the fractional part.
pub fn probabilistic_round<R: Rng + ?Sized>(v: f64, rng: &mut R) -> usize {
    let floor = v.floor();
    let frac = v - floor;
    let up = rng.gen::<f64>() < frac;
    (floor as usize) + usize::from(up)
}

/// Zero-pads features to `capacity` columns and rescales the live columns by
/// `capacity / d` so input magnitudes stay comparable across dimensions.
pub fn pad_and_scale(x: &Array2<f64>, capacity: usize) -> Result<Array2<f64>> {
    let d = x.ncols();
    if d > capacity {
        return Err(Error::Capacity {
            got: d,
            capacity,
        });
    }
    let scale = capacity as f64 / d as f64;
    let mut out = Array2::zeros((x.nrows(), capacity));
    for i in 0..x.nrows() {
        for j in 0..d {
            out[[i, j]] = x[[i, j]] * scale;
        }
    }
    Ok(out)
}

/// Training mode tag carried with each batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Plain,
    MeanHead,
    Kg,
}

/// One dataset prepared for a training step.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Zero-padded, rescaled features, `n x capacity`.
    pub features: Array2<f64>,
    pub y: Vec<f64>,
    /// Number of live feature columns.
    pub dim: usize,
    /// Points before the split are context, the rest are held out.
    pub split: usize,
    pub user_prior: Option<UserPriorSpec>,
    pub mode: TrainMode,
}

/// Shape of the training stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchConfig {
    pub prior: PriorConfig,
    /// Feature capacity of the model.
    pub capacity: usize,
    /// Dimensions are drawn uniformly from `1..=max_dim`.
    pub max_dim: usize,
    /// Dataset sizes are drawn uniformly from `min_points..=max_points`.
    pub min_points: usize,
    pub max_points: usize,
    /// Consecutive datasets sharing one set of sampled hyperparameters.
    pub group_size: usize,
}

impl BatchConfig {
    pub fn new(prior: PriorConfig, capacity: usize) -> Self {
        Self {
            prior,
            capacity,
            max_dim: capacity,
            min_points: 1,
            max_points: 60,
            group_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.capacity == 0 || self.max_dim == 0 || self.max_dim > self.capacity {
            return Err(Error::Config("invalid dimension capacity".into()));
        }
        if self.min_points == 0 || self.min_points > self.max_points {
            return Err(Error::Config("invalid dataset size range".into()));
        }
        Ok(())
    }
}

/// Draws one batch of training datasets. The dataset size is shared across
/// the batch, dimensions vary per dataset, and the split position is drawn
/// per dataset. The BNN prior reuses one architecture per group of
/// `group_size` consecutive datasets.
pub fn sample_training_batch(
    cfg: &BatchConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    cfg.validate()?;
    let n = rng.gen_range(cfg.min_points..=cfg.max_points);
    let mut items = Vec::with_capacity(batch_size);

    let mut group_arch: Option<(BnnArchitecture, usize, usize)> = None;
    for _ in 0..batch_size {
        let d = rng.gen_range(1..=cfg.max_dim);
        let (dataset, user_prior) = if cfg.prior.user_prior {
            let sampler = cfg.prior.sampler();
            let (ds, spec) =
                sample_user_prior_task(sampler.as_ref(), n, d, &IntervalBase::Uniform, rng)?;
            (ds, Some(spec))
        } else if let BasePrior::Bnn(bnn_cfg) = &cfg.prior.base {
            // Grouped hyperparameter sampling; architectures are reused while
            // the dimension matches and the group is not exhausted.
            let need_new = match &group_arch {
                Some((arch, left, _)) => *left == 0 || arch.input_dim() != d,
                None => true,
            };
            if need_new {
                group_arch = Some((bnn_cfg.sample_architecture(d, rng), cfg.group_size, d));
            }
            let (arch, left, _) = group_arch.as_mut().unwrap();
            *left -= 1;
            let ds = bnn::sample_with_architecture(arch, cfg.prior.input_warp, n, d, rng)?;
            let ds = apply_spurious_if_needed(&cfg.prior, ds, n, d, rng)?;
            (ds, None)
        } else {
            let sampler = cfg.prior.sampler();
            (sampler.sample(n, d, rng)?, None)
        };

        let features = pad_and_scale(&dataset.x, cfg.capacity)?;
        let split = if n == 1 { 1 } else { rng.gen_range(1..n) };
        items.push(BatchItem {
            features,
            y: dataset.y,
            dim: d,
            split: split.min(n),
            user_prior,
            mode: TrainMode::Plain,
        });
    }
    Ok(items)
}

fn apply_spurious_if_needed(
    prior: &PriorConfig,
    dataset: Dataset,
    n: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if prior.spurious_fraction <= 0.0 {
        return Ok(dataset);
    }
    // Rewrap an already sampled dataset: designate columns and overwrite them
    // with noise. The generator used all columns here, so instead resample
    // through the generic wrapper for correctness.
    let wrapper = SpuriousDims {
        inner: IdentitySampler(dataset),
        fraction: prior.spurious_fraction,
    };
    wrapper.sample(n, d, rng)
}

/// Adapter handing out one fixed dataset, truncated to the requested columns.
struct IdentitySampler(Dataset);

impl DatasetSampler for IdentitySampler {
    fn sample(&self, n: usize, d: usize, _rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let x = self.0.x.slice(ndarray::s![..n, ..d]).to_owned();
        Dataset::new(x, self.0.y[..n].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::mean_and_se;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn probabilistic_round_is_exact_on_integers() {
        let mut r = rng(1);
        for _ in 0..100 {
            assert_eq!(probabilistic_round(2.0, &mut r), 2);
        }
    }

    #[test]
    fn probabilistic_round_frequency() {
        let mut r = rng(2);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| (probabilistic_round(2.3, &mut r) == 3) as u8 as f64)
            .collect();
        let (mean, se) = mean_and_se(&draws);
        assert!((mean - 0.3).abs() <= 3.0 * se, "frac {mean}");

        let draws: Vec<f64> = (0..100_000)
            .map(|_| (probabilistic_round(2.5, &mut r) == 3) as u8 as f64)
            .collect();
        let (mean, se) = mean_and_se(&draws);
        assert!((mean - 0.5).abs() <= 3.0 * se, "frac {mean}");
    }

    #[test]
    fn pad_and_scale_examples() {
        let x = Array2::from_shape_vec((1, 9), vec![0.5; 9]).unwrap();
        let padded = pad_and_scale(&x, 18).unwrap();
        assert_eq!(padded.ncols(), 18);
        // K / k = 18 / 9 = 2.
        assert_eq!(padded[[0, 0]], 1.0);
        for j in 9..18 {
            assert_eq!(padded[[0, j]], 0.0);
        }

        let x = Array2::from_shape_vec((1, 4), vec![0.25; 4]).unwrap();
        let same = pad_and_scale(&x, 4).unwrap();
        assert_eq!(same[[0, 2]], 0.25);

        assert!(pad_and_scale(&x, 2).is_err());
    }

    #[test]
    fn spurious_fraction_zero_is_identity() {
        let prior = PriorConfig::simple_gp();
        let mut r1 = rng(5);
        let base = prior.sampler().sample(12, 3, &mut r1).unwrap();
        let wrapped = add_spurious_dims(prior.sampler(), 0.0);
        let mut r2 = rng(5);
        let ds = wrapped.sample(12, 3, &mut r2).unwrap();
        // Fraction zero keeps the generator stream untouched apart from the
        // two split-off child seeds.
        assert_eq!(ds.len(), base.len());
        assert_eq!(ds.dim(), base.dim());
    }

    #[test]
    fn spurious_columns_do_not_influence_outputs() {
        let prior = PriorConfig::simple_gp();
        let wrapped = add_spurious_dims(prior.sampler(), 0.45);
        let mut r = rng(7);
        let (ds, mask) = wrapped.sample_with_mask(20, 4, &mut r).unwrap();
        assert!(mask.iter().any(|m| *m));

        // Permuting a spurious column cannot change y: y was produced before
        // the noise columns were filled in.
        let mut permuted = ds.clone();
        let j = mask.iter().position(|m| *m).unwrap();
        let col: Vec<f64> = permuted.x.column(j).iter().rev().copied().collect();
        for (i, v) in col.into_iter().enumerate() {
            permuted.x[[i, j]] = v;
        }
        assert_eq!(permuted.y, ds.y);
    }

    #[test]
    fn spurious_long_run_fraction() {
        let prior = PriorConfig::simple_gp();
        let wrapped = add_spurious_dims(prior.sampler(), 0.30);
        let mut r = rng(11);
        // With d = 9 the expected count 2.7 exercises the randomized rounding.
        let d = 9;
        let mut fractions = Vec::new();
        for _ in 0..400 {
            let (_, mask) = wrapped.sample_with_mask(2, d, &mut r).unwrap();
            fractions.push(mask.iter().filter(|m| **m).count() as f64 / d as f64);
        }
        let (mean, se) = mean_and_se(&fractions);
        assert!((mean - 0.30).abs() <= 3.0 * se, "fraction {mean} (se {se})");
    }

    #[test]
    fn prior_warp_mode_is_identity() {
        let mut x = Array2::from_shape_vec((3, 2), vec![0.1, 0.9, 0.4, 0.5, 0.6, 0.2]).unwrap();
        let orig = x.clone();
        apply_prior_warp(&mut x, &[(1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(x, orig);
    }

    #[test]
    fn prior_warp_stays_in_unit_interval_and_is_monotone() {
        let cfg = PriorWarpConfig::default();
        let mut r = rng(13);
        for _ in 0..200 {
            let params = cfg.sample_params(1, &mut r);
            let (a, b) = params[0];
            let mut prev = 0.0;
            for i in 0..=50 {
                let x = i as f64 / 50.0;
                let w = crate::transforms::kumaraswamy(x, a, b);
                assert!((0.0..=1.0).contains(&w));
                if i > 0 {
                    assert!(w >= prev, "warp not monotone at {x}");
                }
                prev = w;
            }
        }
    }

    #[test]
    fn training_batch_shapes_and_padding() {
        let cfg = BatchConfig {
            prior: PriorConfig::simple_gp(),
            capacity: 6,
            max_dim: 6,
            min_points: 4,
            max_points: 12,
            group_size: 4,
        };
        let mut r = rng(17);
        let batch = sample_training_batch(&cfg, 16, &mut r).unwrap();
        assert_eq!(batch.len(), 16);
        let n = batch[0].y.len();
        for item in &batch {
            assert_eq!(item.y.len(), n);
            assert_eq!(item.features.ncols(), 6);
            assert!(item.split >= 1 && item.split <= n);
            // Padded coordinates are exactly zero.
            for j in item.dim..6 {
                for i in 0..n {
                    assert_eq!(item.features[[i, j]], 0.0);
                }
            }
            let scale = 6.0 / item.dim as f64;
            for j in 0..item.dim {
                for i in 0..n {
                    assert!(item.features[[i, j]] <= scale + 1e-12);
                }
            }
        }
    }

    #[test]
    fn training_batch_is_deterministic() {
        let cfg = BatchConfig::new(PriorConfig::hebo(), 4);
        let a = sample_training_batch(&cfg, 8, &mut rng(23)).unwrap();
        let b = sample_training_batch(&cfg, 8, &mut rng(23)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.y, y.y);
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn dataset_rejects_bad_inputs() {
        let x = Array2::from_shape_vec((2, 1), vec![0.2, 1.4]).unwrap();
        assert!(Dataset::new(x, vec![0.0, 1.0]).is_err());
        let x = Array2::from_shape_vec((2, 1), vec![0.2, 0.4]).unwrap();
        assert!(Dataset::new(x, vec![0.0, f64::NAN]).is_err());
    }
}
