//! Optimum-location side information: each dataset is paired with one
//! interval and confidence per dimension, sampled so that conditioning on the
//! emitted interval reweights the dataset prior by the stated mixture.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSampler};
use crate::error::Result;

/// Number of intervals in the fixed family.
pub const INTERVAL_COUNT: usize = 15;

/// The fixed interval family `[i/k, (i+1)/k]` for `k` in `1..=5`. Every
/// coordinate lies in exactly five of them, one per `k`.
pub fn interval_family() -> Vec<(f64, f64)> {
    let mut family = Vec::with_capacity(INTERVAL_COUNT);
    for k in 1..=5usize {
        for i in 0..k {
            family.push((i as f64 / k as f64, (i + 1) as f64 / k as f64));
        }
    }
    family
}

/// Indices of the family intervals containing a coordinate.
pub fn containing_intervals(m: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(5);
    let mut base = 0;
    for k in 1..=5usize {
        let i = ((m * k as f64).floor() as usize).min(k - 1);
        out.push(base + i);
        base += k;
    }
    out
}

/// One dimension's belief: an interval and a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimPrior {
    pub lo: f64,
    pub hi: f64,
    pub rho: f64,
}

/// Per-dimension optimum beliefs; `None` is the no-belief sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPriorSpec {
    pub dims: Vec<Option<DimPrior>>,
}

impl UserPriorSpec {
    pub fn none(d: usize) -> Self {
        Self {
            dims: vec![None; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for dp in self.dims.iter().flatten() {
            if !(0.0 <= dp.lo && dp.lo < dp.hi && dp.hi <= 1.0) {
                return Err(crate::Error::Domain(format!(
                    "invalid interval [{}, {}]",
                    dp.lo, dp.hi
                )));
            }
            if !(0.0..=1.0).contains(&dp.rho) {
                return Err(crate::Error::Domain(format!("invalid rho {}", dp.rho)));
            }
        }
        Ok(())
    }
}

/// Distribution used for the unconditional branch of the interval mixture.
#[derive(Debug, Clone, PartialEq)]
pub enum IntervalBase {
    /// Every family interval equally likely; the cheap approximation used for
    /// training.
    Uniform,
    /// Explicit weights, e.g. true containment probabilities of a known
    /// prior. Normalized internally.
    Weighted(Vec<f64>),
}

impl IntervalBase {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            IntervalBase::Uniform => rng.gen_range(0..INTERVAL_COUNT),
            IntervalBase::Weighted(w) => {
                let total: f64 = w.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                for (i, wi) in w.iter().enumerate() {
                    u -= wi;
                    if u < 0.0 {
                        return i;
                    }
                }
                w.len() - 1
            }
        }
    }
}

/// Samples an interval index given the optimum coordinate: with probability
/// `rho` uniformly among the five containing intervals, otherwise from the
/// base distribution.
pub fn sample_interval<R: Rng + ?Sized>(
    m: f64,
    rho: f64,
    base: &IntervalBase,
    rng: &mut R,
) -> usize {
    if rng.gen::<f64>() < rho {
        let containing = containing_intervals(m);
        containing[rng.gen_range(0..containing.len())]
    } else {
        base.sample(rng)
    }
}

/// Draws a dataset together with one interval belief per dimension.
///
/// The dataset's maximum training example stands in for the true optimum. One
/// confidence is drawn per task and shared across the dimensions.
pub fn sample_user_prior_task(
    sampler: &dyn DatasetSampler,
    n: usize,
    d: usize,
    base: &IntervalBase,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, UserPriorSpec)> {
    let dataset = sampler.sample(n, d, rng)?;
    let m_row = dataset.argmax();
    let rho: f64 = rng.gen();
    let family = interval_family();
    let dims = (0..d)
        .map(|j| {
            let idx = sample_interval(dataset.x[[m_row, j]], rho, base, rng);
            let (lo, hi) = family[idx];
            Some(DimPrior { lo, hi, rho })
        })
        .collect();
    Ok((dataset, UserPriorSpec { dims }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::PriorConfig;
    use rand::SeedableRng;

    #[test]
    fn family_has_fifteen_intervals_and_five_containing() {
        let family = interval_family();
        assert_eq!(family.len(), INTERVAL_COUNT);
        for m in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            let containing = containing_intervals(m);
            assert_eq!(containing.len(), 5);
            for idx in containing {
                let (lo, hi) = family[idx];
                assert!(lo <= m && m <= hi + 1e-12, "m {m} not in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn full_confidence_always_contains_the_maximum() {
        let prior = PriorConfig::simple_gp();
        let sampler = prior.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let family = interval_family();
        for _ in 0..200 {
            let dataset = sampler.sample(8, 2, &mut rng).unwrap();
            let m_row = dataset.argmax();
            for j in 0..2 {
                let m = dataset.x[[m_row, j]];
                let idx = sample_interval(m, 1.0, &IntervalBase::Uniform, &mut rng);
                let (lo, hi) = family[idx];
                assert!(lo <= m && m <= hi);
            }
        }
    }

    #[test]
    fn zero_confidence_intervals_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let draws = 100_000usize;
        let mut counts = vec![0usize; INTERVAL_COUNT];
        for _ in 0..draws {
            let m = rng.gen::<f64>();
            counts[sample_interval(m, 0.0, &IntervalBase::Uniform, &mut rng)] += 1;
        }
        // Chi-squared against the uniform distribution; 14 degrees of freedom
        // has a 99.9% quantile of about 36.1.
        let expected = draws as f64 / INTERVAL_COUNT as f64;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let diff = *c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        assert!(chi2 < 36.1, "chi2 {chi2}");
    }

    #[test]
    fn task_sampler_emits_valid_specs() {
        let prior = PriorConfig::simple_gp();
        let sampler = prior.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (dataset, spec) =
            sample_user_prior_task(sampler.as_ref(), 10, 3, &IntervalBase::Uniform, &mut rng)
                .unwrap();
        assert_eq!(dataset.dim(), 3);
        assert_eq!(spec.dims.len(), 3);
        spec.validate().unwrap();
        let rho = spec.dims[0].unwrap().rho;
        assert!(spec.dims.iter().all(|d| d.unwrap().rho == rho));
    }

    /// The emitted interval reweights the dataset prior by the stated
    /// mixture. On a small discrete prior with exact containment weights,
    /// P(m in I | emitted I) must equal rho + (1 - rho) P(m in I).
    #[test]
    fn mixture_identity_on_discrete_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        // Discrete optimum locations with lopsided probabilities.
        let locations = [0.03, 0.22, 0.41, 0.58, 0.77, 0.96];
        let weights = [0.05, 0.10, 0.30, 0.25, 0.20, 0.10];
        let family = interval_family();

        // True containment probability per interval.
        let containment: Vec<f64> = family
            .iter()
            .map(|(lo, hi)| {
                locations
                    .iter()
                    .zip(weights.iter())
                    .filter(|(m, _)| *lo <= **m && **m <= *hi)
                    .map(|(_, w)| w)
                    .sum()
            })
            .collect();
        let base = IntervalBase::Weighted(containment.clone());

        for rho in [0.0, 0.5, 1.0] {
            let draws = 200_000usize;
            let mut emitted = vec![0usize; INTERVAL_COUNT];
            let mut contained = vec![0usize; INTERVAL_COUNT];
            for _ in 0..draws {
                let u = rng.gen::<f64>();
                let mut acc = 0.0;
                let mut m = locations[locations.len() - 1];
                for (loc, w) in locations.iter().zip(weights.iter()) {
                    acc += w;
                    if u < acc {
                        m = *loc;
                        break;
                    }
                }
                let idx = sample_interval(m, rho, &base, &mut rng);
                emitted[idx] += 1;
                let (lo, hi) = family[idx];
                if lo <= m && m <= hi {
                    contained[idx] += 1;
                }
            }
            for i in 0..INTERVAL_COUNT {
                if emitted[i] < 500 {
                    continue;
                }
                let p_hat = contained[i] as f64 / emitted[i] as f64;
                let expected = rho + (1.0 - rho) * containment[i];
                let se = (expected * (1.0 - expected) / emitted[i] as f64)
                    .sqrt()
                    .max(1e-9);
                assert!(
                    (p_hat - expected).abs() <= 3.0 * se + 1e-9,
                    "rho {rho} interval {i}: {p_hat} vs {expected} (se {se})"
                );
            }
        }
    }
}
