//! Exact finite-time distributions on enumerated state spaces, used as the
//! oracle against which every simulator is checked.

use std::collections::BTreeMap;

use crate::collisions::slow_rates;
use crate::comb::{combinations, integer_partitions, partitions_with_profile};
use crate::measures::{MeasureOnUnitInterval, XiMeasure};
use crate::partitions::StructuredPartition;
use crate::rates::{fast_rates, lambda_rate, xi_rate, ModelParams, RateError};
use crate::sim::{absorption_probabilities, DiscreteDistribution, SimError};

/// Largest sample size for which transient distributions are computed.
pub(crate) const TRANSIENT_MAX: u32 = 5;

/// Poisson truncation bound guaranteed by `transient_distribution_exact`.
pub const TRANSIENT_TOLERANCE: f64 = 1e-10;

/// Which continuous-time dynamics to solve.
#[derive(Debug, Clone)]
pub enum ProcessKind<'a> {
    /// Within-deme dynamics (mergers and moves), frozen once scattered.
    Fast(&'a ModelParams),
    /// Limiting collision dynamics with instantaneous scatter resolution.
    Slow(&'a ModelParams),
    /// Exchangeable single-merger coalescent on scattered states.
    SingleMerger(&'a MeasureOnUnitInterval),
    /// Exchangeable simultaneous-merger coalescent on scattered states.
    SimultaneousMerger(&'a XiMeasure),
}

/// A finite-time law plus the mass the Poisson truncation discarded before
/// renormalization (always below `TRANSIENT_TOLERANCE`).
#[derive(Debug, Clone)]
pub struct TransientDistribution {
    pub distribution: DiscreteDistribution<StructuredPartition>,
    pub truncation_error: f64,
}

fn scattered_only(state: &StructuredPartition) -> Result<(), SimError> {
    if state.is_scattered() {
        Ok(())
    } else {
        Err(SimError::Rate(RateError::NotScattered))
    }
}

fn merge_groups(
    state: &StructuredPartition,
    groups: &[&Vec<usize>],
) -> StructuredPartition {
    let blocks: Vec<Vec<u32>> = state.blocks().cloned().collect();
    let mut taken = vec![false; blocks.len()];
    let mut demes: Vec<Vec<Vec<u32>>> = Vec::new();
    for group in groups {
        let mut union = Vec::new();
        for &i in group.iter() {
            union.extend(blocks[i].iter().copied());
            taken[i] = true;
        }
        union.sort_unstable();
        demes.push(vec![union]);
    }
    for (i, block) in blocks.iter().enumerate() {
        if !taken[i] {
            demes.push(vec![block.clone()]);
        }
    }
    StructuredPartition::new(state.n(), demes).expect("merged blocks partition the sample")
}

/// Generator row of the requested process at `state`: positive rates to
/// distinct other states (self-loops dropped).
fn generator_row(
    process: &ProcessKind,
    state: &StructuredPartition,
    absorb_memo: &mut BTreeMap<StructuredPartition, BTreeMap<StructuredPartition, f64>>,
) -> Result<Vec<(StructuredPartition, f64)>, SimError> {
    let mut row: BTreeMap<StructuredPartition, f64> = BTreeMap::new();
    match process {
        ProcessKind::Fast(params) => {
            for (target, rate) in fast_rates(params, state)? {
                *row.entry(target).or_insert(0.0) += rate;
            }
        }
        ProcessKind::Slow(params) => {
            for entry in slow_rates(params, state)? {
                let settled = absorption_probabilities(params, &entry.outcome, absorb_memo)?;
                for (target, p) in settled {
                    *row.entry(target).or_insert(0.0) += entry.rate * p;
                }
            }
            // Ghost mass returns to the current state and does not move the
            // law; it must not appear as a transition.
            row.remove(state);
        }
        ProcessKind::SingleMerger(measure) => {
            let b = state.block_count() as u32;
            let indices: Vec<usize> = (0..b as usize).collect();
            for k in 2..=b {
                let rate = lambda_rate(measure, b, k)?;
                if rate == 0.0 {
                    continue;
                }
                for subset in combinations(&indices, k as usize) {
                    let target = merge_groups(state, &[&subset]);
                    *row.entry(target).or_insert(0.0) += rate;
                }
            }
        }
        ProcessKind::SimultaneousMerger(measure) => {
            let b = state.block_count() as u32;
            let indices: Vec<usize> = (0..b as usize).collect();
            for k in 2..=b {
                for sizes in integer_partitions(k, 2) {
                    let rate = xi_rate(measure, b, &sizes)?;
                    if rate == 0.0 {
                        continue;
                    }
                    let mut profile = sizes.clone();
                    profile.extend(std::iter::repeat(1).take((b - k) as usize));
                    for grouping in partitions_with_profile(&indices, &profile) {
                        let genuine: Vec<&Vec<usize>> =
                            grouping.iter().filter(|g| g.len() >= 2).collect();
                        let target = merge_groups(state, &genuine);
                        *row.entry(target).or_insert(0.0) += rate;
                    }
                }
            }
        }
    }
    Ok(row.into_iter().filter(|&(_, r)| r > 0.0).collect())
}

/// Poisson cap per uniformization segment; larger horizons are split so the
/// leading weight exp(-M t) stays representable.
const SEGMENT_CAP: f64 = 500.0;

/// Exact law of the chosen process at time `t`, via Poisson-weighted powers
/// of the uniformized transition operator over the reachable state space.
/// An absorbing start (no outgoing rate anywhere reachable) returns the
/// point mass. A crowded start for the slow process is resolved by the
/// time-zero scatter before the clock starts.
pub fn transient_distribution_exact(
    process: &ProcessKind,
    initial: &StructuredPartition,
    t: f64,
) -> Result<TransientDistribution, SimError> {
    if initial.n() > TRANSIENT_MAX {
        return Err(SimError::TooLarge { n: initial.n(), max: TRANSIENT_MAX });
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(SimError::BadHorizon { t });
    }
    let mut absorb_memo = BTreeMap::new();
    // Initial vector: a point mass, except for the slow process started
    // crowded, which scatters instantaneously at time zero.
    let seed: Vec<(StructuredPartition, f64)> = match process {
        ProcessKind::Slow(params) => {
            params.validate()?;
            absorption_probabilities(params, initial, &mut absorb_memo)?.into_iter().collect()
        }
        ProcessKind::Fast(params) => {
            params.validate()?;
            vec![(initial.clone(), 1.0)]
        }
        ProcessKind::SingleMerger(_) | ProcessKind::SimultaneousMerger(_) => {
            scattered_only(initial)?;
            vec![(initial.clone(), 1.0)]
        }
    };

    // Closure of the reachable state space and its generator rows.
    let mut states: Vec<StructuredPartition> = Vec::new();
    let mut index: BTreeMap<StructuredPartition, usize> = BTreeMap::new();
    let mut raw_rows: Vec<Vec<(StructuredPartition, f64)>> = Vec::new();
    for (state, _) in &seed {
        if !index.contains_key(state) {
            index.insert(state.clone(), states.len());
            states.push(state.clone());
        }
    }
    let mut next = 0;
    while next < states.len() {
        let state = states[next].clone();
        let row = generator_row(process, &state, &mut absorb_memo)?;
        for (target, _) in &row {
            if !index.contains_key(target) {
                index.insert(target.clone(), states.len());
                states.push(target.clone());
            }
        }
        raw_rows.push(row);
        next += 1;
    }
    let rows: Vec<Vec<(usize, f64)>> = raw_rows
        .into_iter()
        .map(|row| row.into_iter().map(|(target, rate)| (index[&target], rate)).collect())
        .collect();
    let exits: Vec<f64> =
        rows.iter().map(|row| row.iter().map(|&(_, r)| r).sum()).collect();

    let mut v = vec![0.0; states.len()];
    for (state, p) in &seed {
        v[index[state]] += p;
    }
    let uniform_rate = exits.iter().cloned().fold(0.0f64, f64::max);
    if uniform_rate == 0.0 || t == 0.0 {
        let items = states.into_iter().zip(v).filter(|&(_, p)| p > 0.0).collect();
        return Ok(TransientDistribution {
            distribution: DiscreteDistribution::new(items)?,
            truncation_error: 0.0,
        });
    }

    let segments = (uniform_rate * t / SEGMENT_CAP).ceil().max(1.0) as u64;
    let tau = t / segments as f64;
    let tolerance = TRANSIENT_TOLERANCE / segments as f64;
    for _ in 0..segments {
        v = uniformization_segment(&rows, &exits, uniform_rate, tau, &v, tolerance);
    }

    let total: f64 = v.iter().sum();
    let truncation_error = 1.0 - total;
    assert!(
        truncation_error < TRANSIENT_TOLERANCE,
        "Poisson truncation must stay below the advertised bound"
    );
    let items: Vec<(StructuredPartition, f64)> = states
        .into_iter()
        .zip(v)
        .filter(|&(_, p)| p > 0.0)
        .map(|(s, p)| (s, p / total))
        .collect();
    Ok(TransientDistribution {
        distribution: DiscreteDistribution::new(items)?,
        truncation_error,
    })
}

/// One Poisson-weighted power series sum: the law after `tau` time units
/// started from `v`, truncated once the missing Poisson mass drops below
/// `tolerance`.
fn uniformization_segment(
    rows: &[Vec<(usize, f64)>],
    exits: &[f64],
    uniform_rate: f64,
    tau: f64,
    v: &[f64],
    tolerance: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut cur = v.to_vec();
    let mut weight = (-uniform_rate * tau).exp();
    let mut covered = weight;
    for (o, c) in out.iter_mut().zip(&cur) {
        *o += weight * c;
    }
    let mut j = 0u64;
    while 1.0 - covered > tolerance {
        let mut next = vec![0.0; cur.len()];
        for (x, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            next[x] += mass * (1.0 - exits[x] / uniform_rate);
            for &(y, rate) in &rows[x] {
                next[y] += mass * rate / uniform_rate;
            }
        }
        cur = next;
        j += 1;
        weight *= uniform_rate * tau / j as f64;
        covered += weight;
        for (o, c) in out.iter_mut().zip(&cur) {
            *o += weight * c;
        }
        assert!(j < 5_000_000, "Poisson tail must close under the segment cap");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        simulate_fast_process, simulate_lambda_coalescent, simulate_limit_process, StopRule,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(deme_size: u32, num_sources: u32, m1: f64, e: f64, y: f64) -> ModelParams {
        ModelParams {
            deme_size,
            num_sources,
            migration_rate: m1,
            extinction_rate: e,
            within_deme_measure: MeasureOnUnitInterval::dirac(0.5),
            extinction_measure: MeasureOnUnitInterval::dirac(y),
            deme_rate_scale: 1.0,
        }
    }

    fn part(text: &str) -> StructuredPartition {
        text.parse().expect("test literal parses")
    }

    #[test]
    fn zero_time_returns_the_point_mass() {
        let p = model(3, 2, 0.4, 1.0, 0.6);
        let start = part("1|2|3");
        for process in [ProcessKind::Fast(&p), ProcessKind::Slow(&p)] {
            let result = transient_distribution_exact(&process, &start, 0.0).unwrap();
            assert_eq!(result.distribution.support_size(), 1);
            assert_eq!(result.distribution.probability(&start), 1.0);
            assert_eq!(result.truncation_error, 0.0);
        }
    }

    #[test]
    fn absorbing_starts_return_point_masses() {
        // Scattered states are absorbing for the fast process; with no
        // migration and no extinctions they absorb the slow process too.
        let p = model(3, 1, 0.0, 0.0, 0.6);
        let start = part("1|2|3");
        for process in [ProcessKind::Fast(&p), ProcessKind::Slow(&p)] {
            let result = transient_distribution_exact(&process, &start, 3.0).unwrap();
            assert_eq!(result.distribution.probability(&start), 1.0);
        }
    }

    #[test]
    fn slow_pair_merger_matches_the_two_state_closed_form() {
        // Independent arithmetic for n=2: the pair merges at rate
        //   q = a1 + s1 + (a2 + s2) * chi
        // where a1/a2 are the gathered-and-merged / gathered-apart
        // extinction rates, s1/s2 the migrant-collision analogues, and chi
        // the within-deme merge probability of a crowded pair.
        let (big_n, big_k, m1, e, y, xd) = (3u32, 2u32, 0.4, 1.1, 0.8, 0.5);
        let p = ModelParams {
            deme_size: big_n,
            num_sources: big_k,
            migration_rate: m1,
            extinction_rate: e,
            within_deme_measure: MeasureOnUnitInterval::dirac(xd),
            extinction_measure: MeasureOnUnitInterval::dirac(y),
            deme_rate_scale: 1.0,
        };
        let nf = big_n as f64;
        let kf = big_k as f64;
        let a1 = e * y * y / (kf * nf);
        let a2 = e * y * y * (nf - 1.0) / (kf * nf);
        let s1 = 2.0 * m1 / nf;
        let s2 = 2.0 * m1 * (nf - 1.0) / nf;
        let w = xd * xd;
        let chi = w / (w + 2.0 * m1);
        let q = a1 + s1 + (a2 + s2) * chi;
        for t in [0.3, 1.0, 2.5] {
            let result =
                transient_distribution_exact(&ProcessKind::Slow(&p), &part("1|2"), t).unwrap();
            let merged = result.distribution.probability(&part("1,2"));
            let want = 1.0 - (-q * t).exp();
            assert!((merged - want).abs() < 1e-10, "t={t}: {merged} vs {want}");
            assert!(result.truncation_error < TRANSIENT_TOLERANCE);
        }
    }

    #[test]
    fn fast_process_concentrates_on_scattered_states() {
        let p = model(4, 2, 0.7, 0.0, 0.6);
        let result =
            transient_distribution_exact(&ProcessKind::Fast(&p), &part("1;2;3"), 100.0).unwrap();
        let crowded_mass: f64 = result
            .distribution
            .iter()
            .filter(|(s, _)| !s.is_scattered())
            .map(|(_, p)| p)
            .sum();
        assert!(crowded_mass < 1e-10, "long-run crowded mass {crowded_mass}");
    }

    #[test]
    fn long_horizons_split_into_segments_without_losing_mass() {
        let p = model(3, 1, 0.5, 0.0, 0.6);
        let result =
            transient_distribution_exact(&ProcessKind::Fast(&p), &part("1;2;3"), 2000.0).unwrap();
        assert!(result.truncation_error < TRANSIENT_TOLERANCE);
        let total: f64 = result.distribution.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kingman_block_counts_match_the_closed_form() {
        // Three lineages under pairwise-only mergers: block-count
        // probabilities solve a two-rate pure death chain.
        let kingman = MeasureOnUnitInterval::dirac(0.0);
        let start = StructuredPartition::scattered_singletons(3);
        for t in [0.2, 0.7, 1.9] {
            let result =
                transient_distribution_exact(&ProcessKind::SingleMerger(&kingman), &start, t)
                    .unwrap();
            let by_count = result.distribution.map(|s| s.block_count());
            let p3 = (-3.0 * t).exp();
            let p2 = 1.5 * ((-t).exp() - (-3.0 * t).exp());
            let p1 = 1.0 - p3 - p2;
            assert!((by_count.probability(&3) - p3).abs() < 1e-10);
            assert!((by_count.probability(&2) - p2).abs() < 1e-10);
            assert!((by_count.probability(&1) - p1).abs() < 1e-10);
        }
    }

    #[test]
    fn single_coordinate_embedding_gives_the_same_law() {
        let lambda = MeasureOnUnitInterval::new(vec![[0.4, 0.7], [0.9, 0.3]], vec![]).unwrap();
        let xi = XiMeasure::from_interval_atoms(&lambda).unwrap();
        let start = StructuredPartition::scattered_singletons(4);
        for t in [0.5, 1.5] {
            let a = transient_distribution_exact(&ProcessKind::SingleMerger(&lambda), &start, t)
                .unwrap();
            let b =
                transient_distribution_exact(&ProcessKind::SimultaneousMerger(&xi), &start, t)
                    .unwrap();
            for (state, pa) in a.distribution.iter() {
                assert!(
                    (pa - b.distribution.probability(state)).abs() < 1e-10,
                    "{state}: {pa} vs {}",
                    b.distribution.probability(state)
                );
            }
        }
    }

    #[test]
    fn crowded_slow_starts_scatter_before_the_clock_runs() {
        let p = model(3, 2, 0.4, 1.0, 0.6);
        let zero =
            transient_distribution_exact(&ProcessKind::Slow(&p), &part("1;2"), 0.0).unwrap();
        // At t=0 the law is the scatter distribution of the crowded start.
        let merge_rate = 0.25;
        let chi = merge_rate / (merge_rate + 2.0 * 0.4);
        assert!((zero.distribution.probability(&part("1,2")) - chi).abs() < 1e-12);
        assert!((zero.distribution.probability(&part("1|2")) - (1.0 - chi)).abs() < 1e-12);
    }

    #[test]
    fn reference_processes_reject_crowded_starts() {
        let kingman = MeasureOnUnitInterval::dirac(0.0);
        let err = transient_distribution_exact(
            &ProcessKind::SingleMerger(&kingman),
            &part("1;2"),
            1.0,
        );
        assert!(matches!(err, Err(SimError::Rate(RateError::NotScattered))));
    }

    #[test]
    fn size_guard_rejects_large_samples() {
        let p = model(3, 1, 0.1, 0.5, 0.5);
        let start = StructuredPartition::scattered_singletons(6);
        assert!(matches!(
            transient_distribution_exact(&ProcessKind::Slow(&p), &start, 1.0),
            Err(SimError::TooLarge { n: 6, max: 5 })
        ));
    }

    fn empirical_matches_oracle<F>(
        runs: u32,
        t: f64,
        oracle: &TransientDistribution,
        mut draw: F,
    ) where
        F: FnMut() -> StructuredPartition,
    {
        let mut counts: BTreeMap<StructuredPartition, u32> = BTreeMap::new();
        for _ in 0..runs {
            *counts.entry(draw()).or_insert(0) += 1;
        }
        for (state, want) in oracle.distribution.iter() {
            let got = counts.get(state).copied().unwrap_or(0) as f64 / runs as f64;
            let sigma = (want * (1.0 - want) / runs as f64).sqrt().max(1e-9);
            assert!(
                (got - want).abs() < 4.0 * sigma,
                "t={t} state {state}: {got} vs {want} (sigma {sigma})"
            );
        }
        let oracle_support: f64 =
            counts.keys().map(|s| oracle.distribution.probability(s)).sum();
        assert!(oracle_support > 0.999, "simulation visited unexpected states");
    }

    #[test]
    fn fast_simulator_matches_the_oracle() {
        let p = model(3, 2, 0.6, 0.0, 0.6);
        let start = part("1;2;3");
        let t = 0.4;
        let oracle = transient_distribution_exact(&ProcessKind::Fast(&p), &start, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        empirical_matches_oracle(10_000, t, &oracle, || {
            simulate_fast_process(&start, &p, t, &mut rng).unwrap().state_at(t).clone()
        });
    }

    #[test]
    fn limit_simulator_matches_the_oracle() {
        let p = model(2, 2, 0.5, 1.2, 0.7);
        let start = StructuredPartition::scattered_singletons(3);
        let t = 0.8;
        let oracle = transient_distribution_exact(&ProcessKind::Slow(&p), &start, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        empirical_matches_oracle(10_000, t, &oracle, || {
            simulate_limit_process(&start, &p, StopRule::Horizon(t), &mut rng)
                .unwrap()
                .state_at(t)
                .clone()
        });
    }

    #[test]
    fn single_merger_simulator_matches_the_oracle() {
        let lambda = MeasureOnUnitInterval::new(vec![[0.6, 1.0]], vec![]).unwrap();
        let start = StructuredPartition::scattered_singletons(4);
        let t = 1.0;
        let oracle =
            transient_distribution_exact(&ProcessKind::SingleMerger(&lambda), &start, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        empirical_matches_oracle(10_000, t, &oracle, || {
            simulate_lambda_coalescent(&lambda, 4, &mut rng).unwrap().state_at(t).clone()
        });
    }
}
