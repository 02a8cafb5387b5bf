//! Exact transition rates: exchangeable coalescents on unstructured
//! partitions, the within-deme dynamics of the subdivided model between
//! extinction events, and structural checks on deme-level rate tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comb::{binomial, combinations};
use crate::measures::{MeasureError, MeasureOnUnitInterval, XiMeasure};
use crate::partitions::{
    enumerate_structured, Destination, OccupancyProfile, StructuredPartition,
    UnstructuredPartition,
};

#[derive(Debug, Error)]
pub enum RateError {
    #[error("{name} must be {requirement}, got {value}")]
    BadParam { name: &'static str, requirement: &'static str, value: f64 },
    #[error("{name} must be a probability measure, got total mass {mass}")]
    NotProbability { name: &'static str, mass: f64 },
    #[error("{name} must not carry an atom at 0")]
    AtomAtZero { name: &'static str },
    #[error("merge size must satisfy 2 <= k <= b, got k = {k} with b = {b} blocks")]
    BadMergeSize { k: u32, b: u32 },
    #[error("group sizes must be non-empty, each >= 2, and sum to at most {b}: got {sizes:?}")]
    BadGroupSizes { b: u32, sizes: Vec<u32> },
    #[error("need at least two lineages, got {n}")]
    TooFewLineages { n: u32 },
    #[error("state must be scattered (at most one block per deme)")]
    NotScattered,
    #[error("size {n} exceeds the supported maximum {max} for exact enumeration")]
    TooLarge { n: u32, max: u32 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

fn default_scale() -> f64 {
    1.0
}

/// Parameters of the subdivided-population model: islands of a fixed number
/// of individuals, redistribution of lone lineages between islands, and
/// recurrent extinction events that wipe out whole islands and refill them
/// from a bounded set of source islands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    /// Individuals per deme (N).
    pub deme_size: u32,
    /// Number of source demes repopulating the vacated ones (K).
    pub num_sources: u32,
    /// Rate at which a single lineage moves to another deme (m1).
    pub migration_rate: f64,
    /// Rate of extinction events per deme (e).
    pub extinction_rate: f64,
    /// Law of the fraction of a deme replaced in one reproduction event.
    pub within_deme_measure: MeasureOnUnitInterval,
    /// Law of the fraction of demes wiped out in one extinction event.
    pub extinction_measure: MeasureOnUnitInterval,
    /// Multiplier on within-deme merger rates; 1 matches the sampling
    /// recursion convention, N the alternative deme-size scaling.
    #[serde(default = "default_scale")]
    pub deme_rate_scale: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), RateError> {
        if self.deme_size < 1 {
            return Err(RateError::BadParam {
                name: "deme_size",
                requirement: "a positive integer",
                value: self.deme_size as f64,
            });
        }
        if self.num_sources < 1 {
            return Err(RateError::BadParam {
                name: "num_sources",
                requirement: "a positive integer",
                value: self.num_sources as f64,
            });
        }
        for (name, value) in
            [("migration_rate", self.migration_rate), ("extinction_rate", self.extinction_rate)]
        {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(RateError::BadParam { name, requirement: "finite and >= 0", value });
            }
        }
        if !(self.deme_rate_scale > 0.0 && self.deme_rate_scale.is_finite()) {
            return Err(RateError::BadParam {
                name: "deme_rate_scale",
                requirement: "finite and > 0",
                value: self.deme_rate_scale,
            });
        }
        for (name, measure) in [
            ("within_deme_measure", &self.within_deme_measure),
            ("extinction_measure", &self.extinction_measure),
        ] {
            measure.validate()?;
            if !measure.is_probability() {
                return Err(RateError::NotProbability { name, mass: measure.total_mass() });
            }
            if measure.diagnostics().atom_at_zero {
                return Err(RateError::AtomAtZero { name });
            }
        }
        Ok(())
    }
}

/// Generator entry of the binary-merger coalescent: 1 for each transition
/// joining exactly two blocks, minus (blocks choose 2) on the diagonal,
/// and 0 for every other pair of states.
pub fn kingman_rate(from: &UnstructuredPartition, to: &UnstructuredPartition) -> f64 {
    if from.n() != to.n() {
        return 0.0;
    }
    if from == to {
        let b = from.block_count() as u64;
        return -((b * (b - 1) / 2) as f64);
    }
    if to.block_count() + 1 == from.block_count() && coarsens(from, to) {
        1.0
    } else {
        0.0
    }
}

/// Whether every block of `fine` sits inside a single block of `coarse`.
fn coarsens(fine: &UnstructuredPartition, coarse: &UnstructuredPartition) -> bool {
    let mut owner = vec![usize::MAX; fine.n() as usize + 1];
    for (i, block) in coarse.blocks().iter().enumerate() {
        for &e in block {
            owner[e as usize] = i;
        }
    }
    fine.blocks().iter().all(|block| block.iter().all(|&e| owner[e as usize] == owner[block[0] as usize]))
}

/// Rate of one specific merge of k blocks out of b under a single-merger
/// coalescent driven by a finite measure on [0, 1].
pub fn lambda_rate(measure: &MeasureOnUnitInterval, b: u32, k: u32) -> Result<f64, RateError> {
    if k < 2 || k > b {
        return Err(RateError::BadMergeSize { k, b });
    }
    Ok(measure.moment(k - 2, b - k)?)
}

/// Rate of one specific simultaneous merge under a simplex-measure
/// coalescent: the groups listed in `group_sizes` (each of size >= 2) merge
/// at once among `b` blocks, the rest staying untouched.
pub fn xi_rate(measure: &XiMeasure, b: u32, group_sizes: &[u32]) -> Result<f64, RateError> {
    let r = group_sizes.len();
    let total: u32 = group_sizes.iter().sum();
    if r == 0 || group_sizes.iter().any(|&k| k < 2) || total > b {
        return Err(RateError::BadGroupSizes { b, sizes: group_sizes.to_vec() });
    }
    let s = b - total;
    let mut rate = 0.0;
    for atom in &measure.atoms {
        let coords = &atom.coords;
        let sum_sq: f64 = coords.iter().map(|x| x * x).sum();
        let dust = (1.0 - coords.iter().sum::<f64>()).max(0.0);
        // Groups land on distinct coordinates; l of the s untouched blocks
        // may also ride along on further distinct coordinates, the rest
        // staying in the dust component.
        let mut inner = 0.0;
        for l in 0..=s {
            if r + l as usize > coords.len() {
                break;
            }
            let tuples = sum_over_distinct_tuples(coords, group_sizes, l as usize);
            if tuples == 0.0 {
                continue;
            }
            let dust_part = if s == l { 1.0 } else { dust.powi((s - l) as i32) };
            inner += binomial(s as u64, l as u64) as f64 * dust_part * tuples;
        }
        rate += atom.weight / sum_sq * inner;
    }
    if r == 1 && group_sizes[0] == 2 {
        rate += measure.kingman_mass;
    }
    Ok(rate)
}

/// Sum over ordered tuples of distinct coordinate indices of the product of
/// coordinates raised to the given exponents, followed by `extra` positions
/// with exponent 1.
fn sum_over_distinct_tuples(coords: &[f64], exponents: &[u32], extra: usize) -> f64 {
    fn rec(coords: &[f64], used: &mut [bool], pos: usize, exponents: &[u32], extra: usize) -> f64 {
        if pos == exponents.len() + extra {
            return 1.0;
        }
        let e = if pos < exponents.len() { exponents[pos] } else { 1 };
        let mut acc = 0.0;
        for i in 0..coords.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            acc += coords[i].powi(e as i32) * rec(coords, used, pos + 1, exponents, extra);
            used[i] = false;
        }
        acc
    }
    rec(coords, &mut vec![false; coords.len()], 0, exponents, extra)
}

/// Block-count transition rates inside one fully occupied deme of n
/// lineages: `per_target[k - 1]` is the rate of dropping from n blocks to
/// exactly k in one event, for k = 1..n-1.
#[derive(Debug, Clone)]
pub struct GRates {
    pub per_target: Vec<f64>,
    /// Sum of `per_target`: total rate of leaving the n-block state.
    pub total: f64,
}

pub fn g_rates(measure: &MeasureOnUnitInterval, n: u32) -> Result<GRates, RateError> {
    if n < 2 {
        return Err(RateError::TooFewLineages { n });
    }
    let mut per_target = Vec::with_capacity(n as usize - 1);
    for k in 1..n {
        let rate = binomial(n as u64, (k - 1) as u64) as f64 * measure.moment(n - k + 1, k - 1)?;
        per_target.push(rate);
    }
    let total = per_target.iter().sum();
    Ok(GRates { per_target, total })
}

/// The total of `g_rates` computed from its closed form
/// mass - m(0, n) - n * m(1, n - 1), where m(j, l) is the (j, l) moment.
pub fn g_total_closed_form(measure: &MeasureOnUnitInterval, n: u32) -> Result<f64, RateError> {
    if n < 2 {
        return Err(RateError::TooFewLineages { n });
    }
    Ok(measure.total_mass() - measure.moment(0, n)? - n as f64 * measure.moment(1, n - 1)?)
}

/// Transition row of the between-collision dynamics out of a structured
/// state: every j-subset of the blocks sharing a deme merges at
/// `deme_rate_scale` times the (j, b - j) moment of the within-deme
/// measure, and every block sharing its deme moves alone to a fresh empty
/// deme at the migration rate. States with at most one block per deme have
/// an empty row. Entries reaching the same canonical state are summed.
pub fn fast_rates(
    params: &ModelParams,
    state: &StructuredPartition,
) -> Result<Vec<(StructuredPartition, f64)>, RateError> {
    let mut row: BTreeMap<StructuredPartition, f64> = BTreeMap::new();
    for (d, deme) in state.demes().iter().enumerate() {
        let b = deme.len();
        if b < 2 {
            // A lone block moving to another empty deme leaves the canonical
            // form unchanged, so no event originates here.
            continue;
        }
        let indices: Vec<usize> = (0..b).collect();
        for j in 2..=b {
            let rate = params.deme_rate_scale
                * params.within_deme_measure.moment(j as u32, (b - j) as u32)?;
            if rate == 0.0 {
                continue;
            }
            for subset in combinations(&indices, j) {
                let target = state.merge_blocks(d, &subset).expect("subset lies in one deme");
                *row.entry(target).or_insert(0.0) += rate;
            }
        }
        if params.migration_rate > 0.0 {
            for i in 0..b {
                let target =
                    state.move_block(d, i, Destination::Fresh).expect("block index in range");
                *row.entry(target).or_insert(0.0) += params.migration_rate;
            }
        }
    }
    Ok(row.into_iter().collect())
}

/// All placements of element n+1 into a state over n elements: into an
/// existing block, as a new block of an occupied deme, or alone in a fresh
/// deme. These are exactly the states whose restriction to n elements
/// returns the input.
pub(crate) fn extensions(state: &StructuredPartition) -> Vec<StructuredPartition> {
    let n = state.n();
    let raw = state.demes().to_vec();
    let mut out = Vec::new();
    for (d, deme) in raw.iter().enumerate() {
        for b in 0..deme.len() {
            let mut demes = raw.clone();
            demes[d][b].push(n + 1);
            out.push(StructuredPartition::new(n + 1, demes).expect("extension is valid"));
        }
        let mut demes = raw.clone();
        demes[d].push(vec![n + 1]);
        out.push(StructuredPartition::new(n + 1, demes).expect("extension is valid"));
    }
    let mut demes = raw;
    demes.push(vec![vec![n + 1]]);
    out.push(StructuredPartition::new(n + 1, demes).expect("extension is valid"));
    out
}

/// Worst violation of sampling consistency for a rate-row function: the rate
/// of any transition in a sample of size k must equal the summed rates of
/// all transitions of any (k+1)-extension whose restriction realizes it.
fn max_row_consistency_violation<F>(row_fn: F, k_max: u32) -> Result<f64, RateError>
where
    F: Fn(&StructuredPartition) -> Result<Vec<(StructuredPartition, f64)>, RateError>,
{
    const MAX: u32 = 6;
    if k_max > MAX {
        return Err(RateError::TooLarge { n: k_max, max: MAX });
    }
    let mut worst = 0.0f64;
    for k in 1..k_max {
        for zeta in enumerate_structured(k).expect("k_max is guarded") {
            let row: BTreeMap<_, _> = row_fn(&zeta)?.into_iter().collect();
            for extension in extensions(&zeta) {
                let mut projected: BTreeMap<StructuredPartition, f64> = BTreeMap::new();
                for (target, rate) in row_fn(&extension)? {
                    let down = target.restrict(k).expect("targets keep all elements");
                    if down == zeta {
                        // Invisible in the smaller sample: not a transition.
                        continue;
                    }
                    *projected.entry(down).or_insert(0.0) += rate;
                }
                for (eta, &rate) in &row {
                    let p = projected.get(eta).copied().unwrap_or(0.0);
                    worst = worst.max((rate - p).abs());
                }
                for (eta, &p) in &projected {
                    if !row.contains_key(eta) {
                        worst = worst.max(p.abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Worst violation of sampling consistency of the between-collision
/// dynamics over all sample sizes up to k_max (at most 6).
pub fn check_fast_consistency(params: &ModelParams, k_max: u32) -> Result<f64, RateError> {
    max_row_consistency_violation(|state| fast_rates(params, state), k_max)
}

/// Whether a deme occupancy profile can reach another in one event made of
/// merges within demes followed by moves of blocks to previously empty
/// demes: the target needs at least as many occupied demes, at most as many
/// blocks, and an injective pairing of old demes to new ones that lowers at
/// least one per-deme block count while increasing none.
pub fn profile_supports(src: &OccupancyProfile, dst: &OccupancyProfile) -> bool {
    let a = src.counts();
    let b = dst.counts();
    if b.len() < a.len() || src == dst {
        return false;
    }
    let sum_a: u32 = a.iter().sum();
    let sum_b: u32 = b.iter().sum();
    if sum_b > sum_a {
        return false;
    }
    // Counts are descending; matching each source deme with the largest
    // unused target count that fits is exchange-optimal. A strictly smaller
    // pairing exists automatically: equality everywhere would force equal
    // multisets (ruled out above) once the block sums match, and a target
    // with extra demes holds strictly fewer blocks in the paired part.
    let mut used = vec![false; b.len()];
    for &k in a {
        let mut found = false;
        for (i, &kp) in b.iter().enumerate() {
            if !used[i] && kp <= k {
                used[i] = true;
                found = true;
                break;
            }
        }
        if !found {
            return false;
        }
    }
    true
}

/// Structural diagnostics for an explicit deme-level rate table given as
/// (source profile, target profile, rate) entries.
#[derive(Debug, Clone, Default)]
pub struct FastTableDiagnostics {
    /// Positive-rate entries whose target is unreachable from the source.
    pub unsupported: Vec<(OccupancyProfile, OccupancyProfile)>,
    /// Entries whose rate is negative or not finite.
    pub invalid_rates: Vec<(OccupancyProfile, OccupancyProfile, f64)>,
    /// Sources with a deme of two or more blocks but no outgoing rate:
    /// such states would never resolve into one lineage per deme.
    pub stuck_profiles: Vec<OccupancyProfile>,
}

impl FastTableDiagnostics {
    pub fn is_clean(&self) -> bool {
        self.unsupported.is_empty()
            && self.invalid_rates.is_empty()
            && self.stuck_profiles.is_empty()
    }
}

pub fn validate_fast_table(
    table: &[(OccupancyProfile, OccupancyProfile, f64)],
) -> FastTableDiagnostics {
    let mut diag = FastTableDiagnostics::default();
    let mut outgoing: BTreeMap<&OccupancyProfile, f64> = BTreeMap::new();
    for (src, dst, rate) in table {
        let total = outgoing.entry(src).or_insert(0.0);
        if !(rate.is_finite() && *rate >= 0.0) {
            diag.invalid_rates.push((src.clone(), dst.clone(), *rate));
            continue;
        }
        if *rate > 0.0 {
            if profile_supports(src, dst) {
                *total += rate;
            } else {
                diag.unsupported.push((src.clone(), dst.clone()));
            }
        }
    }
    for (src, total) in outgoing {
        if total == 0.0 && src.counts().iter().any(|&k| k >= 2) {
            diag.stuck_profiles.push(src.clone());
        }
    }
    diag
}
