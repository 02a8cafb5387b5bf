//! Statistical comparison utilities: total-variation distances with Monte
//! Carlo error bars, a permutation null for two-sample equality, a chi-square
//! goodness-of-fit test, and exponential-rate point estimates.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Hypergeometric};
use thiserror::Error;

use crate::sim::DiscreteDistribution;

/// Resamples used for bootstrap standard errors.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Resplits used for the two-sample permutation null.
pub const PERMUTATION_ROUNDS: usize = 200;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empirical distribution holds no observations")]
    EmptySample,
    #[error("observed category has zero probability under the reference")]
    UnexpectedCategory,
    #[error("goodness-of-fit needs at least two cells after pooling, got {cells}")]
    TooFewCells { cells: usize },
}

/// Observation counts over a discrete support.
#[derive(Debug, Clone, Default)]
pub struct EmpiricalDistribution<T: Ord> {
    counts: BTreeMap<T, u64>,
    total: u64,
}

impl<T: Ord + Clone> EmpiricalDistribution<T> {
    pub fn new() -> Self {
        Self { counts: BTreeMap::new(), total: 0 }
    }

    pub fn record(&mut self, value: T) {
        self.record_n(value, 1);
    }

    pub fn record_n(&mut self, value: T, count: u64) {
        if count > 0 {
            *self.counts.entry(value).or_insert(0) += count;
            self.total += count;
        }
    }

    pub fn from_samples<I: IntoIterator<Item = T>>(samples: I) -> Self {
        let mut out = Self::new();
        for s in samples {
            out.record(s);
        }
        out
    }

    /// Fold another tally into this one (used to combine worker outputs).
    pub fn merge(&mut self, other: &Self) {
        for (value, &count) in &other.counts {
            self.record_n(value.clone(), count);
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, value: &T) -> u64 {
        self.counts.get(value).copied().unwrap_or(0)
    }

    /// Observed relative frequency of `value`.
    pub fn freq(&self, value: &T) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(value) as f64 / self.total as f64
        }
    }

    /// Binomial standard error of the observed frequency of `value`.
    pub fn freq_std_error(&self, value: &T) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let p = self.freq(value);
        (p * (1.0 - p) / self.total as f64).sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&T, u64)> {
        self.counts.iter().map(|(v, &c)| (v, c))
    }

    pub fn support_size(&self) -> usize {
        self.counts.len()
    }

    /// Multinomial resample of the same size, for bootstrap error bars.
    fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let values: Vec<&T> = self.counts.keys().collect();
        let weights: Vec<f64> = self.counts.values().map(|&c| c as f64).collect();
        let mut resampled = Self::new();
        for _ in 0..self.total {
            let idx = pick_index(rng, &weights);
            resampled.record(values[idx].clone());
        }
        resampled
    }
}

fn pick_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Total-variation distance between two exact finitely supported laws.
pub fn tv_exact<T: Ord>(a: &DiscreteDistribution<T>, b: &DiscreteDistribution<T>) -> f64 {
    let mut tv = 0.0;
    for (value, p) in a.iter() {
        tv += (p - b.probability(value)).abs();
    }
    for (value, q) in b.iter() {
        if a.probability(value) == 0.0 {
            tv += q;
        }
    }
    tv / 2.0
}

/// Total-variation distance between an empirical tally and an exact law.
pub fn tv_vs_exact<T: Ord + Clone>(
    emp: &EmpiricalDistribution<T>,
    exact: &DiscreteDistribution<T>,
) -> Result<f64, StatsError> {
    if emp.total() == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut tv = 0.0;
    for (value, _) in emp.iter() {
        tv += (emp.freq(value) - exact.probability(value)).abs();
    }
    for (value, q) in exact.iter() {
        if emp.count(value) == 0 {
            tv += q;
        }
    }
    Ok(tv / 2.0)
}

/// Total-variation distance between two empirical tallies.
pub fn tv_two_sample<T: Ord + Clone>(
    a: &EmpiricalDistribution<T>,
    b: &EmpiricalDistribution<T>,
) -> Result<f64, StatsError> {
    if a.total() == 0 || b.total() == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut tv = 0.0;
    for (value, _) in a.iter() {
        tv += (a.freq(value) - b.freq(value)).abs();
    }
    for (value, _) in b.iter() {
        if a.count(value) == 0 {
            tv += b.freq(value);
        }
    }
    Ok(tv / 2.0)
}

/// Bootstrap standard error of [`tv_vs_exact`]: multinomially resample the
/// tally [`BOOTSTRAP_RESAMPLES`] times and take the standard deviation.
pub fn bootstrap_se_vs_exact<T: Ord + Clone, R: Rng + ?Sized>(
    emp: &EmpiricalDistribution<T>,
    exact: &DiscreteDistribution<T>,
    rng: &mut R,
) -> Result<f64, StatsError> {
    if emp.total() == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut values = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        values.push(tv_vs_exact(&emp.resample(rng), exact)?);
    }
    Ok(standard_deviation(&values))
}

/// Bootstrap standard error of [`tv_two_sample`]: both tallies are resampled
/// independently.
pub fn bootstrap_se_two_sample<T: Ord + Clone, R: Rng + ?Sized>(
    a: &EmpiricalDistribution<T>,
    b: &EmpiricalDistribution<T>,
    rng: &mut R,
) -> Result<f64, StatsError> {
    if a.total() == 0 || b.total() == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut values = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        values.push(tv_two_sample(&a.resample(rng), &b.resample(rng))?);
    }
    Ok(standard_deviation(&values))
}

/// Null law of the two-sample TV statistic under exchangeability: pool the
/// tallies, resplit uniformly at random into the original sizes
/// [`PERMUTATION_ROUNDS`] times, and return the (mean, standard deviation)
/// of the resulting TV values.
///
/// The empirical two-sample TV of equal laws concentrates around a positive
/// value of order `sqrt(cells / size)`, not around zero, so equality checks
/// compare the observed TV against this null rather than against zero.
pub fn tv_permutation_null<T: Ord + Clone, R: Rng + ?Sized>(
    a: &EmpiricalDistribution<T>,
    b: &EmpiricalDistribution<T>,
    rng: &mut R,
) -> Result<(f64, f64), StatsError> {
    if a.total() == 0 || b.total() == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut pooled: BTreeMap<T, u64> = BTreeMap::new();
    for (value, count) in a.iter().chain(b.iter()) {
        *pooled.entry(value.clone()).or_insert(0) += count;
    }
    let pool_total = a.total() + b.total();

    let mut values = Vec::with_capacity(PERMUTATION_ROUNDS);
    for _ in 0..PERMUTATION_ROUNDS {
        // Multivariate hypergeometric split: draw each category's share of
        // the first sample without replacement from the pool.
        let mut remaining_pool = pool_total;
        let mut remaining_first = a.total();
        let mut first = EmpiricalDistribution::new();
        let mut second = EmpiricalDistribution::new();
        for (value, &count) in &pooled {
            let take = if remaining_first == 0 {
                0
            } else if remaining_first == remaining_pool {
                count
            } else {
                Hypergeometric::new(remaining_pool, count, remaining_first)
                    .expect("valid hypergeometric parameters")
                    .sample(rng)
            };
            if take > 0 {
                first.record_n(value.clone(), take);
            }
            if count > take {
                second.record_n(value.clone(), count - take);
            }
            remaining_pool -= count;
            remaining_first -= take;
        }
        values.push(tv_two_sample(&first, &second)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((mean, standard_deviation(&values)))
}

fn standard_deviation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

/// Result of a chi-square goodness-of-fit test.
#[derive(Debug, Clone)]
pub struct ChiSquareResult {
    /// Pearson statistic over the pooled cells.
    pub statistic: f64,
    /// Degrees of freedom (pooled cells minus one).
    pub dof: usize,
    /// Normal score of the statistic via the Wilson-Hilferty cube-root
    /// transform; compare against a z threshold such as 3.
    pub z_score: f64,
}

/// Pearson chi-square test of an observed tally against an exact law.
///
/// Cells with expected count below 5 are pooled (smallest first) so the
/// chi-square approximation holds; reference mass outside the observed
/// support joins the pool as well.
pub fn chi_square_gof<T: Ord + Clone>(
    observed: &EmpiricalDistribution<T>,
    expected: &DiscreteDistribution<T>,
) -> Result<ChiSquareResult, StatsError> {
    let total = observed.total();
    if total == 0 {
        return Err(StatsError::EmptySample);
    }
    for (value, _) in observed.iter() {
        if expected.probability(value) <= 0.0 {
            return Err(StatsError::UnexpectedCategory);
        }
    }

    // (observed count, expected count) per reference cell.
    let mut cells: Vec<(f64, f64)> = expected
        .iter()
        .map(|(value, p)| (observed.count(value) as f64, p * total as f64))
        .collect();
    cells.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (obs, exp) in cells {
        acc.0 += obs;
        acc.1 += exp;
        if acc.1 >= 5.0 {
            pooled.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 {
        // Leftover small cells join the last pooled cell.
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => pooled.push(acc),
        }
    }
    if pooled.len() < 2 {
        return Err(StatsError::TooFewCells { cells: pooled.len() });
    }

    let statistic: f64 = pooled
        .iter()
        .map(|(obs, exp)| (obs - exp).powi(2) / exp)
        .sum();
    let dof = pooled.len() - 1;

    // Wilson-Hilferty: (X/d)^(1/3) is approximately normal with mean
    // 1 - 2/(9d) and variance 2/(9d).
    let d = dof as f64;
    let shift = 1.0 - 2.0 / (9.0 * d);
    let sd = (2.0 / (9.0 * d)).sqrt();
    let z_score = ((statistic / d).cbrt() - shift) / sd;

    Ok(ChiSquareResult { statistic, dof, z_score })
}

/// Exponential-rate point estimate from an event count and a total exposure,
/// with a Wald standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RateEstimate {
    pub events: u64,
    pub exposure: f64,
    /// events / exposure; meaningless when `defined` is false.
    pub rate: f64,
    /// sqrt(events) / exposure.
    pub std_error: f64,
    /// False when the exposure is zero, in which case no estimate exists.
    pub defined: bool,
}

impl RateEstimate {
    pub fn new(events: u64, exposure: f64) -> Self {
        if exposure > 0.0 {
            RateEstimate {
                events,
                exposure,
                rate: events as f64 / exposure,
                std_error: (events as f64).sqrt() / exposure,
                defined: true,
            }
        } else {
            RateEstimate { events, exposure: 0.0, rate: f64::NAN, std_error: f64::NAN, defined: false }
        }
    }
}
