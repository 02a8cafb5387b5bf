//! Exact simulation of the structured coalescent in a metapopulation with a
//! finite number of demes.
//!
//! The simulated clock is the per-generation one: within-deme k-tuple
//! mergers at `deme_rate_scale * moment(k, b-k)` per tuple, per-lineage
//! migration at `migration_rate` with a uniform destination among all demes,
//! and disturbances at `extinction_rate / D`. With `time_rescale` set the
//! reported times are divided by D, equivalently all rates are multiplied by
//! D, which puts collisions on the same clock as the limiting process.

use rand::Rng;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::partitions::StructuredPartition;
use crate::rates::ModelParams;
use crate::sim::{pick_weighted, EventKind, PathEvent, PathSample, SimError, StopRule};

/// Geometry of the finite system: how many demes exist in total, and which
/// clock event times are reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiniteDConfig {
    /// Total number of demes (intended to be at least the sample size; the
    /// simulation requires at least the number of occupied demes).
    pub num_demes: u32,
    /// Report times divided by the number of demes, the scaling under which
    /// the process approaches the limit dynamics as the deme count grows.
    pub time_rescale: bool,
}

/// One competing-exponential channel of the current configuration.
enum Channel {
    /// A specific-size merger inside one deme (uniform tuple on firing).
    DemeMerge { deme: usize, k: usize },
    /// A lineage leaves a crowded deme for one of the empty demes.
    ScatterOut { deme: usize },
    /// A lineage migrates into a specific other occupied deme.
    MigrateInto { from: usize, to: usize },
    /// A lineage's migration resolves to its own deme and its parent slot
    /// hits a co-resident lineage.
    SelfMerge { deme: usize },
    /// A mass disturbance: demes go extinct and are recolonized from source
    /// demes.
    Extinction,
}

fn check_stop_horizon(horizon: f64) -> Result<(), SimError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::BadHorizon { t: horizon });
    }
    Ok(())
}

/// Exact competing-exponentials simulation of the finite-deme coalescent up
/// to `horizon` (on the reported clock). Only changes of the occupancy
/// partition are recorded; event kinds classify the mechanism.
pub fn simulate_finite_d<R: Rng + ?Sized>(
    initial: &StructuredPartition,
    params: &ModelParams,
    config: &FiniteDConfig,
    horizon: f64,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    params.validate()?;
    check_stop_horizon(horizon)?;
    let d_total = config.num_demes as usize;
    let occupied = initial.deme_count();
    if d_total < occupied {
        return Err(SimError::NotEnoughDemes { occupied, num_demes: config.num_demes });
    }
    if d_total < params.num_sources as usize {
        return Err(SimError::NotEnoughDemes {
            occupied: params.num_sources as usize,
            num_demes: config.num_demes,
        });
    }
    let n_size = params.deme_size as usize;
    for deme in initial.demes() {
        if deme.len() > n_size {
            return Err(SimError::DemeOverCapacity {
                blocks: deme.len(),
                deme_size: params.deme_size,
            });
        }
    }

    // Dividing reported times by D is the same as multiplying every rate
    // by D.
    let clock = if config.time_rescale { d_total as f64 } else { 1.0 };
    let scale = params.deme_rate_scale;
    let m1 = params.migration_rate;
    let k_sources = params.num_sources as usize;

    let mut demes: Vec<Vec<Vec<u32>>> = initial.demes().to_vec();
    let mut current = initial.clone();
    let mut events: Vec<PathEvent> = Vec::new();
    let mut t = 0.0;

    loop {
        if current.block_count() == 1 {
            // A single lineage only moves between demes, which the
            // occupancy partition cannot see.
            break;
        }
        let occ = demes.len();
        let mut channels: Vec<Channel> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (d, deme) in demes.iter().enumerate() {
            let b = deme.len();
            for k in 2..=b {
                let per_tuple = scale
                    * params
                        .within_deme_measure
                        .moment(k as u32, (b - k) as u32)
                        .map_err(crate::rates::RateError::from)?;
                let rate = crate::comb::binomial(b as u64, k as u64) as f64 * per_tuple;
                if rate > 0.0 {
                    channels.push(Channel::DemeMerge { deme: d, k });
                    weights.push(clock * rate);
                }
            }
            if b >= 2 {
                if d_total > occ {
                    channels.push(Channel::ScatterOut { deme: d });
                    weights.push(
                        clock * m1 * b as f64 * (d_total - occ) as f64 / d_total as f64,
                    );
                }
                channels.push(Channel::SelfMerge { deme: d });
                weights.push(
                    clock * m1 * (b * (b - 1)) as f64 / (d_total as f64 * n_size as f64),
                );
            }
            for to in 0..occ {
                if to != d {
                    channels.push(Channel::MigrateInto { from: d, to });
                    weights.push(clock * m1 * b as f64 / d_total as f64);
                }
            }
        }
        if params.extinction_rate > 0.0 {
            channels.push(Channel::Extinction);
            weights.push(clock * params.extinction_rate / d_total as f64);
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            break;
        }
        let next = t + Exp::new(total).expect("positive rate").sample(rng);
        if next > horizon {
            break;
        }
        t = next;
        let kind = match channels[pick_weighted(rng, &weights)] {
            Channel::DemeMerge { deme, k } => {
                let chosen = rand::seq::index::sample(rng, demes[deme].len(), k).into_vec();
                merge_within_deme(&mut demes[deme], &chosen);
                EventKind::FastMerge
            }
            Channel::ScatterOut { deme } => {
                let i = rng.random_range(0..demes[deme].len());
                let block = demes[deme].swap_remove(i);
                demes.push(vec![block]);
                EventKind::FastMove
            }
            Channel::SelfMerge { deme } => {
                let pair = rand::seq::index::sample(rng, demes[deme].len(), 2).into_vec();
                merge_within_deme(&mut demes[deme], &pair);
                EventKind::SimpleCollision
            }
            Channel::MigrateInto { from, to } => {
                let i = rng.random_range(0..demes[from].len());
                let block = demes[from].swap_remove(i);
                let parent = rng.random_range(0..n_size);
                if parent < demes[to].len() {
                    let host = &mut demes[to][parent];
                    host.extend(block);
                    host.sort_unstable();
                } else {
                    demes[to].push(block);
                }
                if demes[from].is_empty() {
                    demes.swap_remove(from);
                }
                EventKind::SimpleCollision
            }
            Channel::Extinction => {
                apply_disturbance(&mut demes, params, d_total, k_sources, rng)?;
                EventKind::ExtinctionCollision
            }
        };
        let state = StructuredPartition::new(initial.n(), demes.clone())
            .expect("simulation keeps a valid configuration");
        if state != current {
            events.push(PathEvent { time: t, kind, state: state.clone(), same_state: false });
            current = state;
        }
    }
    Ok(PathSample { initial: initial.clone(), events, end_time: horizon })
}

/// Runs with the given stop rule: a horizon, or until a single block
/// remains (or the dynamics freeze). In the latter case the reported end
/// time is the final event time.
pub fn simulate_finite_d_with_stop<R: Rng + ?Sized>(
    initial: &StructuredPartition,
    params: &ModelParams,
    config: &FiniteDConfig,
    stop: StopRule,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    match stop {
        StopRule::Horizon(h) => simulate_finite_d(initial, params, config, h, rng),
        StopRule::UntilMrca => {
            // The event loop stops on its own at a single block or when no
            // channel is active, so the horizon just needs to be unreachable.
            let path = simulate_finite_d(initial, params, config, 1e300, rng)?;
            let end_time = path.events.last().map(|e| e.time).unwrap_or(0.0);
            Ok(PathSample { end_time, ..path })
        }
    }
}

fn merge_within_deme(deme: &mut Vec<Vec<u32>>, indices: &[usize]) {
    let mut union = Vec::new();
    let mut sorted: Vec<usize> = indices.to_vec();
    sorted.sort_unstable();
    for &i in sorted.iter().rev() {
        let mut block = deme.swap_remove(i);
        union.append(&mut block);
    }
    union.sort_unstable();
    deme.push(union);
}

/// One mass disturbance, backwards in time: every occupied deme is affected
/// independently, affected lineages jump to a uniform parent slot among the
/// source demes' inhabitants, shared parents merge, and lineages staying in
/// an unaffected source deme can be hit by jumpers landing on their slot.
fn apply_disturbance<R: Rng + ?Sized>(
    demes: &mut Vec<Vec<Vec<u32>>>,
    params: &ModelParams,
    d_total: usize,
    k_sources: usize,
    rng: &mut R,
) -> Result<(), SimError> {
    let y = params.extinction_measure.sample(rng).map_err(crate::rates::RateError::from)?;
    let n_size = params.deme_size as usize;
    let occ = demes.len();
    let affected: Vec<bool> = (0..occ).map(|_| rng.random_bool(y.clamp(0.0, 1.0))).collect();
    // Occupied demes take the labels 0..occ among the D exchangeable demes,
    // so a uniform draw of source demes can hit them.
    let sources = rand::seq::index::sample(rng, d_total, k_sources).into_vec();
    let mut slot_of_deme: BTreeMap<usize, usize> = BTreeMap::new();
    for (slot, &label) in sources.iter().enumerate() {
        if label < occ {
            slot_of_deme.insert(label, slot);
        }
    }
    // Per source slot, blocks keyed by the parent individual they track.
    let mut slots: Vec<BTreeMap<usize, Vec<u32>>> = vec![BTreeMap::new(); k_sources];
    let mut untouched: Vec<Vec<Vec<u32>>> = Vec::new();
    for (d, deme) in demes.iter().enumerate() {
        if affected[d] {
            // The deme went extinct: each lineage jumps to a uniform parent
            // among the N*K source inhabitants.
            for block in deme {
                let slot = rng.random_range(0..k_sources);
                let individual = rng.random_range(0..n_size);
                let entry = slots[slot].entry(individual).or_default();
                entry.extend(block.iter().copied());
            }
        } else if let Some(&slot) = slot_of_deme.get(&d) {
            // An unaffected source deme: its lineages stay, occupying
            // distinct individuals that jumpers can land on.
            let labels = rand::seq::index::sample(rng, n_size, deme.len()).into_vec();
            for (block, label) in deme.iter().zip(labels) {
                let entry = slots[slot].entry(label).or_default();
                entry.extend(block.iter().copied());
            }
        } else {
            untouched.push(deme.clone());
        }
    }
    *demes = untouched;
    for slot in slots {
        let mut deme: Vec<Vec<u32>> = Vec::new();
        for (_, mut block) in slot {
            block.sort_unstable();
            deme.push(block);
        }
        if !deme.is_empty() {
            demes.push(deme);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::MeasureOnUnitInterval;
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
    fn geometry_validation_rejects_bad_configurations() {
        let p = model(3, 2, 0.1, 0.5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let three_demes = part("1|2|3");
        let config = FiniteDConfig { num_demes: 2, time_rescale: true };
        assert!(matches!(
            simulate_finite_d(&three_demes, &p, &config, 1.0, &mut rng),
            Err(SimError::NotEnoughDemes { occupied: 3, num_demes: 2 })
        ));
        let one_source_short = ModelParams { num_sources: 9, ..model(3, 2, 0.1, 0.5, 0.5) };
        let config = FiniteDConfig { num_demes: 5, time_rescale: true };
        assert!(matches!(
            simulate_finite_d(&part("1|2"), &one_source_short, &config, 1.0, &mut rng),
            Err(SimError::NotEnoughDemes { .. })
        ));
        let crowded = part("1;2;3;4");
        let config = FiniteDConfig { num_demes: 10, time_rescale: true };
        assert!(matches!(
            simulate_finite_d(&crowded, &p, &config, 1.0, &mut rng),
            Err(SimError::DemeOverCapacity { blocks: 4, deme_size: 3 })
        ));
        assert!(matches!(
            simulate_finite_d(&part("1|2"), &p, &config, -1.0, &mut rng),
            Err(SimError::BadHorizon { .. })
        ));
    }

    #[test]
    fn pure_within_deme_dynamics_reproduce_the_merge_size_law() {
        // No migration and no extinctions: the first event out of one
        // crowded deme is a k-merger with odds C(b,k) * moment(k, b-k).
        let p = model(8, 1, 0.0, 0.0, 0.5);
        let config = FiniteDConfig { num_demes: 10, time_rescale: false };
        let start = StructuredPartition::singletons_in_one_deme(4);
        let measure = &p.within_deme_measure;
        let mut want = [0.0; 3];
        for (i, k) in (2..=4).enumerate() {
            want[i] = crate::comb::binomial(4, k as u64) as f64
                * measure.moment(k, 4 - k).unwrap();
        }
        let total: f64 = want.iter().sum();
        for w in &mut want {
            *w /= total;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let runs = 10_000;
        let mut counts = [0u32; 3];
        for _ in 0..runs {
            let path = simulate_finite_d(&start, &p, &config, 1e9, &mut rng).unwrap();
            let first = path.events.first().expect("mergers are certain");
            assert_eq!(first.kind, EventKind::FastMerge);
            let merged = 4 - first.state.block_count() + 1;
            counts[merged - 2] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            let freq = count as f64 / runs as f64;
            let sigma = (want[i] * (1.0 - want[i]) / runs as f64).sqrt();
            assert!(
                (freq - want[i]).abs() < 3.5 * sigma,
                "k={}: {freq} vs {}",
                i + 2,
                want[i]
            );
        }
    }

    #[test]
    fn certain_extinction_with_one_source_gathers_everything() {
        let p = model(5, 1, 0.0, 2.0, 1.0);
        let config = FiniteDConfig { num_demes: 20, time_rescale: true };
        let start = StructuredPartition::scattered_singletons(3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let path = simulate_finite_d(&start, &p, &config, 1e6, &mut rng).unwrap();
            let first = path.events.first().expect("an extinction is certain");
            assert_eq!(first.kind, EventKind::ExtinctionCollision);
            assert_eq!(
                first.state.deme_count(),
                1,
                "all lineages belong to the single source deme: {}",
                first.state
            );
        }
    }

    #[test]
    fn migration_collision_merges_with_probability_one_over_deme_size() {
        let p = model(4, 1, 0.3, 0.0, 0.5);
        let config = FiniteDConfig { num_demes: 50, time_rescale: true };
        let start = StructuredPartition::scattered_singletons(2);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let runs = 20_000;
        let mut merged = 0u32;
        for _ in 0..runs {
            let path = simulate_finite_d(&start, &p, &config, 1e9, &mut rng).unwrap();
            let first = path.events.first().expect("a collision is certain");
            assert_eq!(first.kind, EventKind::SimpleCollision);
            if first.state.block_count() == 1 {
                merged += 1;
            }
        }
        let freq = merged as f64 / runs as f64;
        let want = 1.0 / 4.0;
        let sigma = (want * (1.0 - want) / runs as f64).sqrt();
        assert!((freq - want).abs() < 3.5 * sigma, "{freq} vs {want}");
    }

    #[test]
    fn rescaling_divides_event_times_by_the_deme_count() {
        let p = model(3, 2, 0.4, 1.0, 0.6);
        let d = 40;
        let start = StructuredPartition::scattered_singletons(3);
        let raw = FiniteDConfig { num_demes: d, time_rescale: false };
        let rescaled = FiniteDConfig { num_demes: d, time_rescale: true };
        let path_raw =
            simulate_finite_d(&start, &p, &raw, 1e9, &mut ChaCha8Rng::seed_from_u64(35))
                .unwrap();
        let path_rescaled =
            simulate_finite_d(&start, &p, &rescaled, 1e9, &mut ChaCha8Rng::seed_from_u64(35))
                .unwrap();
        assert_eq!(path_raw.events.len(), path_rescaled.events.len());
        assert!(!path_raw.events.is_empty());
        for (a, b) in path_raw.events.iter().zip(&path_rescaled.events) {
            assert_eq!(a.state, b.state, "the jump chain is identical");
            assert!(
                (a.time / d as f64 - b.time).abs() <= 1e-12 * a.time.max(1.0),
                "{} vs {}",
                a.time / d as f64,
                b.time
            );
        }
    }

    #[test]
    fn finite_d_pair_law_approaches_the_limit_process() {
        // Closed form for the limit: the scattered pair merges at rate
        //   q = a1 + s1 + (a2 + s2) * chi   (see the transient tests).
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
        let t = 0.8;
        let want = 1.0 - (-q * t).exp();
        let config = FiniteDConfig { num_demes: 500, time_rescale: true };
        let start = StructuredPartition::scattered_singletons(2);
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let runs = 20_000;
        let mut merged = 0u32;
        for _ in 0..runs {
            let path = simulate_finite_d(&start, &p, &config, t, &mut rng).unwrap();
            if path.final_state().block_count() == 1 {
                merged += 1;
            }
        }
        let freq = merged as f64 / runs as f64;
        let sigma = (want * (1.0 - want) / runs as f64).sqrt();
        // The finite-deme bias is of order 1/D on top of the Monte Carlo
        // noise.
        assert!(
            (freq - want).abs() < 3.5 * sigma + 10.0 / 500.0,
            "{freq} vs {want} at D=500"
        );
    }

    #[test]
    fn block_counts_never_increase_and_configurations_stay_valid() {
        let p = model(2, 2, 0.8, 1.5, 0.7);
        let config = FiniteDConfig { num_demes: 15, time_rescale: true };
        let start = StructuredPartition::scattered_singletons(5);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..200 {
            let path = simulate_finite_d(&start, &p, &config, 3.0, &mut rng).unwrap();
            let mut blocks = start.block_count();
            let mut time = 0.0;
            for event in &path.events {
                assert!(event.time >= time, "times are non-decreasing");
                assert!(event.state.block_count() <= blocks, "blocks only merge");
                assert!(event.state.deme_count() <= 15, "never more demes than exist");
                for deme in event.state.demes() {
                    assert!(deme.len() <= 2, "a deme never holds more lineages than members");
                }
                blocks = event.state.block_count();
                time = event.time;
            }
        }
    }

    #[test]
    fn until_mrca_wrapper_reaches_a_single_block() {
        let p = model(3, 1, 0.5, 1.0, 0.8);
        let config = FiniteDConfig { num_demes: 25, time_rescale: true };
        let start = StructuredPartition::scattered_singletons(4);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let path =
            simulate_finite_d_with_stop(&start, &p, &config, StopRule::UntilMrca, &mut rng)
                .unwrap();
        assert_eq!(path.final_state().block_count(), 1);
        assert!(path.end_time > 0.0);
    }
}
