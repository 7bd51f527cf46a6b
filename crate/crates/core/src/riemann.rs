//! Piecewise-constant output distribution over equal-prior-mass buckets with
//! half-normal tails, and closed-form acquisition functions on it.
//!
//! The distribution has `M` interior buckets delimited by `M + 1` borders plus
//! two unbounded tail classes, one on each side. Class masses come from a
//! softmax head, the bucket geometry is fixed once from prior output samples.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// sqrt(2/pi), the mean of a unit half-normal.
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn half_normal_pdf(z: f64, scale: f64) -> f64 {
    if z < 0.0 {
        return 0.0;
    }
    SQRT_2_OVER_PI / scale * (-z * z / (2.0 * scale * scale)).exp()
}

fn half_normal_cdf(z: f64, scale: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else {
        erf(z / (scale * SQRT_2))
    }
}

fn half_normal_icdf(u: f64, scale: f64) -> f64 {
    scale * SQRT_2 * erf_inv(u.clamp(0.0, 1.0))
}

/// Bucket geometry shared by every distribution a model emits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketLayout {
    borders: Vec<f64>,
    tail_scale_left: f64,
    tail_scale_right: f64,
}

impl BucketLayout {
    pub fn new(borders: Vec<f64>, tail_scale_left: f64, tail_scale_right: f64) -> Result<Self> {
        if borders.is_empty() {
            return Err(Error::DegenerateLayout("no borders".into()));
        }
        if !borders.iter().all(|b| b.is_finite()) {
            return Err(Error::DegenerateLayout("non-finite border".into()));
        }
        if borders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateLayout(
                "borders not strictly increasing".into(),
            ));
        }
        if tail_scale_left <= 0.0 || tail_scale_right <= 0.0 {
            return Err(Error::DegenerateLayout("non-positive tail scale".into()));
        }
        Ok(Self {
            borders,
            tail_scale_left,
            tail_scale_right,
        })
    }

    pub fn borders(&self) -> &[f64] {
        &self.borders
    }

    /// Number of interior buckets.
    pub fn num_buckets(&self) -> usize {
        self.borders.len() - 1
    }

    /// Interior buckets plus the two tail classes.
    pub fn num_classes(&self) -> usize {
        self.num_buckets() + 2
    }

    pub fn tail_scale_left(&self) -> f64 {
        self.tail_scale_left
    }

    pub fn tail_scale_right(&self) -> f64 {
        self.tail_scale_right
    }

    pub fn support_min(&self) -> f64 {
        self.borders[0]
    }

    pub fn support_max(&self) -> f64 {
        *self.borders.last().unwrap()
    }

    pub fn bucket_width(&self, bucket: usize) -> f64 {
        self.borders[bucket + 1] - self.borders[bucket]
    }

    /// Class index for an output value: 0 is the left tail, `1..=M` the
    /// buckets, `M + 1` the right tail.
    pub fn class_of(&self, y: f64) -> usize {
        if y < self.support_min() {
            return 0;
        }
        if y >= self.support_max() {
            return self.num_buckets() + 1;
        }
        // partition_point returns the first border > y; bucket index is one less.
        let idx = self.borders.partition_point(|b| *b <= y);
        idx.min(self.num_buckets())
    }

    /// Midpoint of an interior bucket.
    pub fn bucket_center(&self, bucket: usize) -> f64 {
        0.5 * (self.borders[bucket] + self.borders[bucket + 1])
    }
}

/// Equal-mass bucket borders from empirical quantiles of prior output draws.
///
/// `num_buckets` counts all classes including the two tails, so the returned
/// layout has `num_buckets - 1` borders at the `i / num_buckets` quantiles.
/// Borders are placed at the midpoint of the straddling sample pair. Tail
/// scales are set so the half-normal density at the border matches the
/// adjacent bucket's uniform density when both classes carry equal mass.
pub fn build_borders(prior_outputs: &[f64], num_buckets: usize) -> Result<BucketLayout> {
    if num_buckets < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 buckets, got {num_buckets}"
        )));
    }
    let mut sorted: Vec<f64> = prior_outputs
        .iter()
        .copied()
        .filter(|y| y.is_finite())
        .collect();
    if sorted.len() != prior_outputs.len() {
        return Err(Error::Domain("non-finite prior output".into()));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut distinct = 0usize;
    for i in 0..sorted.len() {
        if i == 0 || sorted[i] > sorted[i - 1] {
            distinct += 1;
        }
        if distinct >= num_buckets {
            break;
        }
    }
    if distinct < num_buckets {
        return Err(Error::DegenerateLayout(format!(
            "{distinct} distinct values for {num_buckets} buckets"
        )));
    }

    let n = sorted.len();
    let mut borders = Vec::with_capacity(num_buckets - 1);
    for i in 1..num_buckets {
        let mut t = (i * n / num_buckets).clamp(1, n - 1);
        let mut candidate = 0.5 * (sorted[t - 1] + sorted[t]);
        // Slide past duplicate runs so borders stay strictly increasing.
        while borders.last().is_some_and(|prev| candidate <= *prev) && t < n - 1 {
            t += 1;
            candidate = 0.5 * (sorted[t - 1] + sorted[t]);
        }
        if borders.last().is_some_and(|prev| candidate <= *prev) {
            return Err(Error::DegenerateLayout(
                "could not place strictly increasing borders".into(),
            ));
        }
        borders.push(candidate);
    }

    let (scale_left, scale_right) = if borders.len() >= 2 {
        let first_width = borders[1] - borders[0];
        let last_width = borders[borders.len() - 1] - borders[borders.len() - 2];
        (SQRT_2_OVER_PI * first_width, SQRT_2_OVER_PI * last_width)
    } else {
        // No interior bucket to match; fall back to the sample spread.
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let var = sorted.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let s = (SQRT_2_OVER_PI * var.sqrt()).max(1e-12);
        (s, s)
    };

    BucketLayout::new(borders, scale_left, scale_right)
}

/// A normalized distribution over the classes of a [`BucketLayout`].
#[derive(Debug, Clone)]
pub struct RiemannDistribution {
    layout: Arc<BucketLayout>,
    /// Left-tail mass, `M` bucket masses, right-tail mass. Sums to one.
    probs: Vec<f64>,
}

impl RiemannDistribution {
    pub fn new(layout: Arc<BucketLayout>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != layout.num_classes() {
            return Err(Error::Domain(format!(
                "expected {} class masses, got {}",
                layout.num_classes(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("class masses must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if !(sum - 1.0).abs().le(&1e-3) {
            return Err(Error::Domain(format!("class masses sum to {sum}, not 1")));
        }
        let probs = probs.iter().map(|p| p / sum).collect();
        Ok(Self { layout, probs })
    }

    pub fn layout(&self) -> &BucketLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<BucketLayout> {
        Arc::clone(&self.layout)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn left_tail_mass(&self) -> f64 {
        self.probs[0]
    }

    fn right_tail_mass(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    /// Log density. Finite everywhere the class masses are positive; the
    /// half-normal tails extend the support to the whole real line.
    pub fn log_prob(&self, y: f64) -> f64 {
        let lo = self.layout.support_min();
        let hi = self.layout.support_max();
        if y < lo {
            let d = half_normal_pdf(lo - y, self.layout.tail_scale_left);
            (self.left_tail_mass() * d).ln()
        } else if y >= hi {
            let d = half_normal_pdf(y - hi, self.layout.tail_scale_right);
            (self.right_tail_mass() * d).ln()
        } else {
            let bucket = self.layout.class_of(y) - 1;
            (self.probs[bucket + 1] / self.layout.bucket_width(bucket)).ln()
        }
    }

    pub fn mean(&self) -> f64 {
        let layout = &self.layout;
        let mut acc = self.left_tail_mass()
            * (layout.support_min() - layout.tail_scale_left * SQRT_2_OVER_PI);
        for bucket in 0..layout.num_buckets() {
            acc += self.probs[bucket + 1] * layout.bucket_center(bucket);
        }
        acc += self.right_tail_mass()
            * (layout.support_max() + layout.tail_scale_right * SQRT_2_OVER_PI);
        acc
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();
        if y < lo {
            return self.left_tail_mass()
                * (1.0 - half_normal_cdf(lo - y, layout.tail_scale_left));
        }
        if y >= hi {
            let below = 1.0 - self.right_tail_mass();
            return below
                + self.right_tail_mass() * half_normal_cdf(y - hi, layout.tail_scale_right);
        }
        let bucket = layout.class_of(y) - 1;
        let mut acc = self.left_tail_mass();
        for b in 0..bucket {
            acc += self.probs[b + 1];
        }
        let frac = (y - layout.borders()[bucket]) / layout.bucket_width(bucket);
        acc + self.probs[bucket + 1] * frac
    }

    /// Quantile function, inverse of [`cdf`](Self::cdf) wherever the density
    /// is positive.
    pub fn icdf(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("quantile {q} outside (0, 1)")));
        }
        let layout = &self.layout;
        let p_left = self.left_tail_mass();
        if q < p_left {
            // cdf(y) = p_left * (1 - F_half(lo - y))
            let u = 1.0 - q / p_left;
            return Ok(layout.support_min() - half_normal_icdf(u, layout.tail_scale_left));
        }
        let mut acc = p_left;
        for bucket in 0..layout.num_buckets() {
            let p = self.probs[bucket + 1];
            if q < acc + p {
                let frac = if p > 0.0 { (q - acc) / p } else { 0.0 };
                return Ok(layout.borders()[bucket] + frac * layout.bucket_width(bucket));
            }
            acc += p;
        }
        let p_right = self.right_tail_mass();
        if p_right <= 0.0 {
            return Ok(layout.support_max());
        }
        let u = ((q - (1.0 - p_right)) / p_right).clamp(0.0, 1.0 - 1e-16);
        Ok(layout.support_max() + half_normal_icdf(u, layout.tail_scale_right))
    }

    /// Probability of improvement over `f_star`: the mass strictly above it.
    ///
    /// Split into the left-tail mass above `f_star`, the clipped overlap of
    /// each bucket, and the right-tail mass above `f_star`.
    pub fn acq_pi(&self, f_star: f64) -> f64 {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();

        let left = self.left_tail_mass() * half_normal_cdf(lo - f_star, layout.tail_scale_left);

        let mut buckets = 0.0;
        for bucket in 0..layout.num_buckets() {
            let y_lo = layout.borders()[bucket];
            let y_hi = layout.borders()[bucket + 1];
            let covered = y_hi - f_star.clamp(y_lo, y_hi);
            buckets += self.probs[bucket + 1] * covered / (y_hi - y_lo);
        }

        let right = if f_star <= hi {
            self.right_tail_mass()
        } else {
            self.right_tail_mass() * (1.0 - half_normal_cdf(f_star - hi, layout.tail_scale_right))
        };

        (left + buckets + right).clamp(0.0, 1.0)
    }

    /// Exact expected improvement `E[max(y - f_star, 0)]`.
    pub fn acq_ei(&self, f_star: f64) -> f64 {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();

        let mut acc = 0.0;

        // Left tail: y = lo - z with z half-normal.
        let p_left = self.left_tail_mass();
        if p_left > 0.0 && f_star < lo {
            let s = layout.tail_scale_left;
            let c = lo - f_star;
            let partial = c * half_normal_cdf(c, s)
                - SQRT_2_OVER_PI * s * (1.0 - (-c * c / (2.0 * s * s)).exp());
            acc += p_left * partial;
        }

        for bucket in 0..layout.num_buckets() {
            let y_lo = layout.borders()[bucket];
            let y_hi = layout.borders()[bucket + 1];
            let p = self.probs[bucket + 1];
            if p == 0.0 || f_star >= y_hi {
                continue;
            }
            if f_star <= y_lo {
                acc += p * (0.5 * (y_lo + y_hi) - f_star);
            } else {
                let h = p / (y_hi - y_lo);
                let tail = y_hi - f_star;
                acc += 0.5 * h * tail * tail;
            }
        }

        // Right tail: y = hi + z with z half-normal.
        let p_right = self.right_tail_mass();
        if p_right > 0.0 {
            let s = layout.tail_scale_right;
            if f_star <= hi {
                acc += p_right * ((hi - f_star) + SQRT_2_OVER_PI * s);
            } else {
                let t = f_star - hi;
                let partial = SQRT_2_OVER_PI * s * (-t * t / (2.0 * s * s)).exp()
                    - t * (1.0 - erf(t / (s * SQRT_2)));
                acc += p_right * partial.max(0.0);
            }
        }

        acc.max(0.0)
    }

    /// Upper confidence bound as a predictive quantile.
    pub fn acq_ucb(&self, quantile: f64) -> Result<f64> {
        self.icdf(quantile)
    }

    /// Improvement of the point-mass collapse of the distribution: every bit
    /// of spread is ignored and only the predictive mean counts.
    pub fn acq_ei_on_mean(&self, f_star: f64) -> f64 {
        (self.mean() - f_star).max(0.0)
    }

    pub fn acq_pi_on_mean(&self, f_star: f64) -> f64 {
        if self.mean() > f_star {
            1.0
        } else {
            0.0
        }
    }

    /// Expected improvement conditional on each class, so that
    /// `acq_ei(f) == dot(probs, class_conditional_improvement(f))`. This is
    /// the gradient of EI with respect to the class masses.
    pub fn class_conditional_improvement(&self, f_star: f64) -> Vec<f64> {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();
        let mut out = Vec::with_capacity(self.probs.len());

        let left = if f_star < lo {
            let s = layout.tail_scale_left;
            let c = lo - f_star;
            c * half_normal_cdf(c, s)
                - SQRT_2_OVER_PI * s * (1.0 - (-c * c / (2.0 * s * s)).exp())
        } else {
            0.0
        };
        out.push(left.max(0.0));

        for bucket in 0..layout.num_buckets() {
            let y_lo = layout.borders()[bucket];
            let y_hi = layout.borders()[bucket + 1];
            let v = if f_star >= y_hi {
                0.0
            } else if f_star <= y_lo {
                0.5 * (y_lo + y_hi) - f_star
            } else {
                let tail = y_hi - f_star;
                0.5 * tail * tail / (y_hi - y_lo)
            };
            out.push(v);
        }

        let s = layout.tail_scale_right;
        let right = if f_star <= hi {
            (hi - f_star) + SQRT_2_OVER_PI * s
        } else {
            let t = f_star - hi;
            (SQRT_2_OVER_PI * s * (-t * t / (2.0 * s * s)).exp()
                - t * (1.0 - erf(t / (s * SQRT_2))))
            .max(0.0)
        };
        out.push(right);
        out
    }

    /// Probability of exceeding `f_star` conditional on each class; the
    /// gradient of PI with respect to the class masses.
    pub fn class_conditional_above(&self, f_star: f64) -> Vec<f64> {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();
        let mut out = Vec::with_capacity(self.probs.len());
        out.push(half_normal_cdf(lo - f_star, layout.tail_scale_left));
        for bucket in 0..layout.num_buckets() {
            let y_lo = layout.borders()[bucket];
            let y_hi = layout.borders()[bucket + 1];
            out.push((y_hi - f_star.clamp(y_lo, y_hi)) / (y_hi - y_lo));
        }
        if f_star <= hi {
            out.push(1.0);
        } else {
            out.push(1.0 - half_normal_cdf(f_star - hi, layout.tail_scale_right));
        }
        out
    }

    /// Mean conditional on each class; the gradient of the predictive mean
    /// with respect to the class masses.
    pub fn class_conditional_mean(&self) -> Vec<f64> {
        let layout = &self.layout;
        let mut out = Vec::with_capacity(self.probs.len());
        out.push(layout.support_min() - layout.tail_scale_left * SQRT_2_OVER_PI);
        for bucket in 0..layout.num_buckets() {
            out.push(layout.bucket_center(bucket));
        }
        out.push(layout.support_max() + layout.tail_scale_right * SQRT_2_OVER_PI);
        out
    }

    /// CDF at `y` conditional on each class, plus the density at `y`. Used
    /// for quantile sensitivities via the implicit function theorem.
    pub fn class_conditional_cdf(&self, y: f64) -> (Vec<f64>, f64) {
        let layout = &self.layout;
        let lo = layout.support_min();
        let hi = layout.support_max();
        let mut out = Vec::with_capacity(self.probs.len());
        out.push(1.0 - half_normal_cdf(lo - y, layout.tail_scale_left));
        for bucket in 0..layout.num_buckets() {
            let y_lo = layout.borders()[bucket];
            let y_hi = layout.borders()[bucket + 1];
            out.push((y.clamp(y_lo, y_hi) - y_lo) / (y_hi - y_lo));
        }
        out.push(half_normal_cdf(y - hi, layout.tail_scale_right));
        out
            .iter()
            .for_each(|v| debug_assert!((0.0..=1.0 + 1e-12).contains(v)));
        (out, self.log_prob(y).exp())
    }

    /// Shannon entropy of the class masses in nats.
    pub fn class_entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Draw one output value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = self.probs.len() - 1;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = i;
                break;
            }
        }
        self.sample_class(class, rng)
    }

    fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> f64 {
        let layout = &self.layout;
        let u: f64 = rng.gen();
        if class == 0 {
            layout.support_min() - half_normal_icdf(u, layout.tail_scale_left)
        } else if class == self.probs.len() - 1 {
            layout.support_max() + half_normal_icdf(u, layout.tail_scale_right)
        } else {
            let bucket = class - 1;
            layout.borders()[bucket] + u * layout.bucket_width(bucket)
        }
    }

    /// Draw many values using a precomputed cumulative table.
    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut cumulative = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cumulative.push(acc);
        }
        let last = self.probs.len() - 1;
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let class = cumulative.partition_point(|c| *c <= u).min(last);
                self.sample_class(class, rng)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_bucket(lo: f64, hi: f64) -> RiemannDistribution {
        let layout = BucketLayout::new(vec![lo, hi], 0.5, 0.5).unwrap();
        RiemannDistribution::new(Arc::new(layout), vec![0.0, 1.0, 0.0]).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng) -> RiemannDistribution {
        crate::testkit::random_riemann(rng)
    }

    #[test]
    fn borders_of_four_points_two_buckets() {
        let layout = build_borders(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(layout.borders(), &[2.5]);
    }

    #[test]
    fn borders_match_normal_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::StandardNormal;
        let draws: Vec<f64> = (0..1_000_000)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
            .collect();
        let layout = build_borders(&draws, 10).unwrap();
        // Phi^{-1}(0.1 .. 0.9), frozen from the closed-form normal quantile.
        let expected = [
            -1.2815515655446004,
            -0.8416212335729143,
            -0.5244005127080407,
            -0.2533471031357997,
            0.0,
            0.2533471031357997,
            0.5244005127080407,
            0.8416212335729143,
            1.2815515655446004,
        ];
        for (b, e) in layout.borders().iter().zip(expected.iter()) {
            assert!((b - e).abs() < 0.02, "border {b} vs quantile {e}");
        }
    }

    #[test]
    fn borders_reject_constant_outputs() {
        let err = build_borders(&[3.0; 64], 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateLayout(_)));
    }

    #[test]
    fn borders_balance_sample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, buckets) in &[(1000usize, 10usize), (997, 7), (64, 5)] {
            let draws: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let layout = build_borders(&draws, buckets).unwrap();
            let mut counts = vec![0usize; buckets];
            for y in &draws {
                counts[layout.class_of(*y)] += 1;
            }
            for c in counts {
                assert!(
                    c >= n / buckets && c <= n / buckets + 1,
                    "count {c} for n={n} buckets={buckets}"
                );
            }
        }
    }

    #[test]
    fn log_prob_uniform_bucket() {
        let dist = single_bucket(0.0, 2.0);
        assert_abs_diff_eq!(dist.log_prob(1.0), 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_prob_decreases_in_right_tail() {
        let layout = BucketLayout::new(vec![0.0, 1.0], 0.3, 0.3).unwrap();
        let dist =
            RiemannDistribution::new(Arc::new(layout), vec![0.1, 0.8, 0.1]).unwrap();
        let mut prev = dist.log_prob(1.0);
        for i in 1..50 {
            let lp = dist.log_prob(1.0 + i as f64 * 0.1);
            assert!(lp < prev);
            prev = lp;
        }
    }

    #[test]
    fn density_integrates_to_one() {
        // Midpoint quadrature with cells aligned to the bucket borders, so the
        // only quadrature error comes from the smooth half-normal tails.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dist = random_dist(&mut rng);
            let layout = dist.layout().clone();
            let mut integral = 0.0;
            let cell = |lo: f64, hi: f64, steps: usize| {
                let h = (hi - lo) / steps as f64;
                let mut acc = 0.0;
                for i in 0..steps {
                    let y = lo + (i as f64 + 0.5) * h;
                    acc += dist.log_prob(y).exp() * h;
                }
                acc
            };
            for b in 0..layout.num_buckets() {
                integral += cell(layout.borders()[b], layout.borders()[b + 1], 64);
            }
            let left_reach = 10.0 * layout.tail_scale_left();
            let right_reach = 10.0 * layout.tail_scale_right();
            integral += cell(layout.support_min() - left_reach, layout.support_min(), 200_000);
            integral += cell(layout.support_max(), layout.support_max() + right_reach, 200_000);
            assert!(
                (integral - 1.0).abs() < 1e-6,
                "density integral {integral}"
            );
        }
    }

    #[test]
    fn mean_of_symmetric_bucket() {
        assert_abs_diff_eq!(single_bucket(0.0, 2.0).mean(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icdf_inverts_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let dist = random_dist(&mut rng);
            let lo = dist.layout().support_min();
            let hi = dist.layout().support_max();
            for i in 1..20 {
                let y = lo + (hi - lo) * i as f64 / 20.0;
                let q = dist.cdf(y);
                if q > 1e-12 && q < 1.0 - 1e-12 {
                    let back = dist.icdf(q).unwrap();
                    assert_abs_diff_eq!(back, y, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn icdf_rejects_out_of_domain() {
        let dist = single_bucket(0.0, 1.0);
        assert!(dist.icdf(0.0).is_err());
        assert!(dist.icdf(1.0).is_err());
        assert!(dist.icdf(-0.5).is_err());
    }

    #[test]
    fn mean_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = random_dist(&mut rng);
        let draws = dist.sample_many(1_000_000, &mut rng);
        let n = draws.len() as f64;
        let mc_mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|y| (y - mc_mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (dist.mean() - mc_mean).abs() <= 3.0 * se,
            "mean {} vs MC {} (se {})",
            dist.mean(),
            mc_mean,
            se
        );
    }

    #[test]
    fn pi_at_boundary_aligned_threshold() {
        let layout = BucketLayout::new(vec![0.0, 1.0, 2.0], 0.5, 0.5).unwrap();
        let dist =
            RiemannDistribution::new(Arc::new(layout), vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_abs_diff_eq!(dist.acq_pi(1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pi_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dist = random_dist(&mut rng);
        assert_abs_diff_eq!(dist.acq_pi(-1e12), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dist.acq_pi(1e12), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pi_is_one_minus_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let dist = random_dist(&mut rng);
            let span = dist.layout().support_max() - dist.layout().support_min();
            for _ in 0..10 {
                let f = dist.layout().support_min() + (rng.gen::<f64>() * 1.6 - 0.3) * span;
                assert!(
                    (dist.acq_pi(f) - (1.0 - dist.cdf(f))).abs() < 1e-9,
                    "PI vs 1-CDF at {f}"
                );
            }
        }
    }

    #[test]
    fn ei_of_uniform_bucket() {
        let dist = single_bucket(0.0, 1.0);
        assert_abs_diff_eq!(dist.acq_ei(0.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ei_zero_above_support_without_right_tail() {
        let layout = BucketLayout::new(vec![0.0, 1.0], 0.5, 0.5).unwrap();
        let dist =
            RiemannDistribution::new(Arc::new(layout), vec![0.3, 0.7, 0.0]).unwrap();
        assert_eq!(dist.acq_ei(1.5), 0.0);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let dist = random_dist(&mut rng);
            let span = dist.layout().support_max() - dist.layout().support_min();
            let f = dist.layout().support_min() + (rng.gen::<f64>() * 1.4 - 0.2) * span;
            let draws = dist.sample_many(100_000, &mut rng);
            let n = draws.len() as f64;
            let imps: Vec<f64> = draws.iter().map(|y| (y - f).max(0.0)).collect();
            let mc = imps.iter().sum::<f64>() / n;
            let var = imps.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let exact = dist.acq_ei(f);
            assert!(
                (exact - mc).abs() <= 3.0 * se + 1e-12,
                "EI {exact} vs MC {mc} (se {se})"
            );
        }
    }

    #[test]
    fn ucb_of_uniform_bucket() {
        let dist = single_bucket(0.0, 1.0);
        assert_abs_diff_eq!(dist.acq_ucb(0.95).unwrap(), 0.95, epsilon = 1e-12);
    }

    #[test]
    fn median_of_symmetric_distribution_is_mean() {
        let layout = BucketLayout::new(vec![-1.0, 0.0, 1.0], 0.4, 0.4).unwrap();
        let dist =
            RiemannDistribution::new(Arc::new(layout), vec![0.1, 0.4, 0.4, 0.1]).unwrap();
        assert_abs_diff_eq!(dist.acq_ucb(0.5).unwrap(), dist.mean(), epsilon = 1e-12);
    }

    #[test]
    fn ucb_matches_empirical_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dist = random_dist(&mut rng);
        let q = 0.9;
        let v = dist.acq_ucb(q).unwrap();
        let draws = dist.sample_many(1_000_000, &mut rng);
        let frac = draws.iter().filter(|y| **y <= v).count() as f64 / draws.len() as f64;
        let se = (q * (1.0 - q) / draws.len() as f64).sqrt();
        assert!((frac - q).abs() <= 3.0 * se, "cdf at ucb {frac} vs {q}");
    }

    #[test]
    fn acq_on_mean_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let dist = random_dist(&mut rng);
        let m = dist.mean();
        assert_abs_diff_eq!(dist.acq_ei_on_mean(m - 0.2), 0.2, epsilon = 1e-12);
        assert_eq!(dist.acq_ei_on_mean(m + 0.1), 0.0);
    }

    #[test]
    fn acq_on_mean_matches_ei_in_narrow_bucket_limit() {
        let layout = BucketLayout::new(vec![0.7, 0.7 + 1e-6], 1e-7, 1e-7).unwrap();
        let dist =
            RiemannDistribution::new(Arc::new(layout), vec![0.0, 1.0, 0.0]).unwrap();
        for f in [0.2, 0.5, 0.69] {
            assert!((dist.acq_ei(f) - dist.acq_ei_on_mean(f)).abs() < 1e-3);
        }
    }

    #[test]
    fn ei_is_nonincreasing_convex_and_dominates_mean_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let dist = random_dist(&mut rng);
            let lo = dist.layout().support_min() - 1.0;
            let hi = dist.layout().support_max() + 1.0;
            let grid: Vec<f64> = (0..60).map(|i| lo + (hi - lo) * i as f64 / 59.0).collect();
            let vals: Vec<f64> = grid.iter().map(|f| dist.acq_ei(*f)).collect();
            let mean = dist.mean();
            for i in 0..grid.len() {
                assert!(vals[i] >= mean - grid[i] - 1e-9, "EI below mean gap");
                if i > 0 {
                    assert!(vals[i] <= vals[i - 1] + 1e-9, "EI increased");
                }
                if i > 1 {
                    // Convexity: midpoint below chord.
                    assert!(vals[i - 1] <= 0.5 * (vals[i] + vals[i - 2]) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn class_conditional_decompositions_match_acquisitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let dist = random_dist(&mut rng);
            let span = dist.layout().support_max() - dist.layout().support_min();
            let f = dist.layout().support_min() + (rng.gen::<f64>() * 1.6 - 0.3) * span;
            let dot = |w: &[f64]| -> f64 {
                w.iter().zip(dist.probs()).map(|(a, p)| a * p).sum()
            };
            assert!((dot(&dist.class_conditional_improvement(f)) - dist.acq_ei(f)).abs() < 1e-10);
            assert!((dot(&dist.class_conditional_above(f)) - dist.acq_pi(f)).abs() < 1e-10);
            assert!((dot(&dist.class_conditional_mean()) - dist.mean()).abs() < 1e-10);
            let (cdf_parts, _) = dist.class_conditional_cdf(f);
            assert!((dot(&cdf_parts) - dist.cdf(f)).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalization_and_pi_cdf_identity(seed in any::<u64>(), f in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = random_dist(&mut rng);
            let total: f64 = dist.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!((dist.acq_pi(f) - (1.0 - dist.cdf(f))).abs() < 1e-9);
        }

        #[test]
        fn class_of_respects_borders(seed in any::<u64>(), y in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = random_dist(&mut rng);
            let class = dist.layout().class_of(y);
            let borders = dist.layout().borders();
            if class == 0 {
                prop_assert!(y < borders[0]);
            } else if class == dist.layout().num_classes() - 1 {
                prop_assert!(y >= *borders.last().unwrap());
            } else {
                prop_assert!(borders[class - 1] <= y && y < borders[class]);
            }
        }
    }
}
