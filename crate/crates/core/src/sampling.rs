//! Allele-configuration distribution of a sample that starts crowded into a
//! single deme.
//!
//! Run the within-deme dynamics on `n` lineages that share one deme: blocks
//! merge at the within-deme rates, and each block independently escapes to an
//! empty deme at the per-block migration rate. Escaped blocks never interact
//! again, so the process ends in a scattered partition of the sample. By
//! exchangeability the probability of ending in a *specific* set partition
//! depends only on its block-size profile; [`p_allele_config`] computes that
//! probability by first-step analysis, and [`p_total_check`] verifies that the
//! per-profile values, weighted by the number of set partitions realising each
//! profile, sum to one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::comb::{binomial, integer_partitions, profile_partition_count};
use crate::measures::{MeasureError, MeasureOnUnitInterval};
use crate::rates::{g_rates, RateError};

/// Largest sample size accepted by [`p_allele_config`].
pub const SAMPLING_MAX: u32 = 30;

/// Largest sample size accepted by [`p_total_check`]; the check enumerates
/// every block-size profile of `n`.
pub const TOTAL_CHECK_MAX: u32 = 10;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("configuration must contain at least one positive count")]
    EmptyConfig,
    #[error("counts must be positive, got 0")]
    ZeroCount,
    #[error("sample size {n} exceeds the supported maximum {max}")]
    TooLarge { n: u32, max: u32 },
    #[error("migration rate must be finite and >= 0, got {m1}")]
    BadMigrationRate { m1: f64 },
    #[error("merger rate scale must be finite and > 0, got {scale}")]
    BadScale { scale: f64 },
    #[error("no events can occur from {n} co-resident lineages: both the merger and migration rates vanish")]
    DegenerateDynamics { n: u32 },
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Block-size profile of a sampled partition: a multiset of positive counts,
/// stored in canonical descending order.
///
/// `AlleleConfig::new(vec![2, 1, 1])` describes a sample of four lineages
/// ending in one block of two and two singleton blocks.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AlleleConfig {
    counts: Vec<u32>,
}

impl AlleleConfig {
    /// Canonicalise a multiset of block sizes. Order does not matter; zero
    /// counts and empty inputs are rejected.
    pub fn new(mut counts: Vec<u32>) -> Result<Self, SamplingError> {
        if counts.is_empty() {
            return Err(SamplingError::EmptyConfig);
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(SamplingError::ZeroCount);
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        Ok(Self { counts })
    }

    /// Block sizes in descending order.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Total sample size (sum of the counts).
    pub fn n(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Number of blocks in the profile.
    pub fn block_count(&self) -> usize {
        self.counts.len()
    }

    /// Number of set partitions of an `n`-set realising this profile.
    pub fn multiplicity(&self) -> u128 {
        profile_partition_count(&self.counts)
    }

    /// All block-size profiles of a sample of size `n`, one per integer
    /// partition of `n`.
    pub fn enumerate(n: u32) -> Vec<AlleleConfig> {
        integer_partitions(n, 1)
            .into_iter()
            .map(|counts| AlleleConfig { counts })
            .collect()
    }
}

impl std::fmt::Display for AlleleConfig {
    /// Counts joined by `+`, e.g. `3+1+1`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, c) in self.counts.iter().enumerate() {
            if i > 0 {
                write!(f, "+")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Probability that `n` lineages crowded into one deme end the within-deme
/// phase in one *specific* set partition whose block sizes are `config`.
///
/// First-step analysis from `n` co-resident blocks: with total event rate
/// `R_n = scale * g_n + n * m1`,
/// - each block escapes at rate `m1`; the escape is compatible with the
///   target partition only if the block is exactly one of its singleton
///   blocks, and removing that block leaves the reduced target;
/// - each set of `i + 1` blocks merges at rate
///   `scale * moment(i + 1, n - i - 1)`; the merge is compatible only if the
///   set lies inside a single target block of size `n_j > i`, and there are
///   `C(n_j, i + 1)` such sets, each leaving the target with `n_j` reduced
///   by `i`.
///
/// Summing the compatible first events and recursing terminates at the
/// single-lineage profile, which has probability one. Multiplying by
/// [`AlleleConfig::multiplicity`] turns the result into the probability of
/// observing the *profile*.
pub fn p_allele_config(
    config: &AlleleConfig,
    measure: &MeasureOnUnitInterval,
    m1: f64,
    scale: f64,
) -> Result<f64, SamplingError> {
    let n = config.n();
    if n > SAMPLING_MAX {
        return Err(SamplingError::TooLarge { n, max: SAMPLING_MAX });
    }
    if !m1.is_finite() || m1 < 0.0 {
        return Err(SamplingError::BadMigrationRate { m1 });
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(SamplingError::BadScale { scale });
    }
    measure.validate()?;

    // Total merger rate g_m and the per-size moments for every block count
    // that can appear while reducing from n lineages.
    let mut g_total = vec![0.0; n as usize + 1];
    for m in 2..=n {
        g_total[m as usize] = g_rates(measure, m)?.total;
    }

    let mut memo: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    p_recursive(&config.counts, measure, m1, scale, &g_total, &mut memo)
}

fn p_recursive(
    counts: &[u32],
    measure: &MeasureOnUnitInterval,
    m1: f64,
    scale: f64,
    g_total: &[f64],
    memo: &mut BTreeMap<Vec<u32>, f64>,
) -> Result<f64, SamplingError> {
    let n: u32 = counts.iter().sum();
    if n == 1 {
        return Ok(1.0);
    }
    if let Some(&p) = memo.get(counts) {
        return Ok(p);
    }

    let total_rate = scale * g_total[n as usize] + n as f64 * m1;
    if total_rate <= 0.0 {
        return Err(SamplingError::DegenerateDynamics { n });
    }

    let mut p = 0.0;
    for (j, &c) in counts.iter().enumerate() {
        // Identical counts contribute identical terms; handle the first of
        // each run and multiply by the run length.
        if j > 0 && counts[j - 1] == c {
            continue;
        }
        let run = counts.iter().filter(|&&d| d == c).count() as f64;

        if c == 1 {
            // A specific singleton block escapes before anything else.
            let reduced = remove_one(counts, j);
            let q = p_recursive(&reduced, measure, m1, scale, g_total, memo)?;
            p += run * (m1 / total_rate) * q;
        }
        // i + 1 of the blocks destined for this target block merge first.
        for i in 1..c {
            let weight = binomial(c as u64, (i + 1) as u64) as f64
                * scale
                * measure.moment(i + 1, n - i - 1)?;
            let reduced = decrement(counts, j, i);
            let q = p_recursive(&reduced, measure, m1, scale, g_total, memo)?;
            p += run * (weight / total_rate) * q;
        }
    }

    memo.insert(counts.to_vec(), p);
    Ok(p)
}

/// Remove the count at `j`, keeping descending order.
fn remove_one(counts: &[u32], j: usize) -> Vec<u32> {
    let mut out = counts.to_vec();
    out.remove(j);
    out
}

/// Decrease the count at `j` by `i`, restoring descending order.
fn decrement(counts: &[u32], j: usize, i: u32) -> Vec<u32> {
    let mut out = counts.to_vec();
    out[j] -= i;
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

/// Deviation of the total law from one: `| sum over profiles of
/// multiplicity * p_allele_config - 1 |`.
///
/// The per-profile probabilities describe specific set partitions, so the
/// weighted sum over all block-size profiles of `n` must equal one exactly;
/// the returned deviation is numerical error only.
pub fn p_total_check(
    n: u32,
    measure: &MeasureOnUnitInterval,
    m1: f64,
    scale: f64,
) -> Result<f64, SamplingError> {
    if n == 0 || n > TOTAL_CHECK_MAX {
        return Err(SamplingError::TooLarge { n, max: TOTAL_CHECK_MAX });
    }
    let mut total = 0.0;
    for config in AlleleConfig::enumerate(n) {
        let p = p_allele_config(&config, measure, m1, scale)?;
        total += config.multiplicity() as f64 * p;
    }
    Ok((total - 1.0).abs())
}
