//! Stochastic simulation of the genealogical processes and exact absorption
//! computations on enumerable state spaces.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution as _, Exp};
use thiserror::Error;

use crate::collisions::slow_rates;
use crate::comb::{integer_partitions, partitions_with_profile};
use crate::measures::{MeasureOnUnitInterval, XiMeasure};
use crate::partitions::StructuredPartition;
use crate::rates::{fast_rates, lambda_rate, xi_rate, ModelParams, RateError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("probabilities must sum to 1 within 1e-12, got {sum}")]
    NotNormalized { sum: f64 },
    #[error("distribution has empty support")]
    EmptySupport,
    #[error("probability must be finite and nonnegative, got {p}")]
    BadProbability { p: f64 },
    #[error("horizon must be positive and finite, got {t}")]
    BadHorizon { t: f64 },
    #[error("size {n} exceeds the supported maximum {max} for exact computation")]
    TooLarge { n: u32, max: u32 },
    #[error("{occupied} demes must fit among {num_demes}")]
    NotEnoughDemes { occupied: usize, num_demes: u32 },
    #[error("a deme holds {blocks} lineages but only {deme_size} individuals")]
    DemeOverCapacity { blocks: usize, deme_size: u32 },
    #[error(transparent)]
    Rate(#[from] RateError),
}

/// Largest sample size for which state spaces are enumerated exactly.
pub(crate) const EXACT_MAX: u32 = 6;

/// What happened at one instant of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Blocks sharing a deme merged into one.
    FastMerge,
    /// A block moved alone to a previously empty deme.
    FastMove,
    /// A single lineage landed in an occupied deme (merging or not).
    SimpleCollision,
    /// A mass extinction gathered lineages into recolonizing demes.
    ExtinctionCollision,
    /// One step of the zero-duration resolution after a collision.
    InstantaneousScatter,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::FastMerge => "fast-merge",
            EventKind::FastMove => "fast-move",
            EventKind::SimpleCollision => "simple-collision",
            EventKind::ExtinctionCollision => "extinction-collision",
            EventKind::InstantaneousScatter => "instantaneous-scatter",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One recorded transition: the state the path is in from `time` onwards.
/// `same_state` is set on a collision whose zero-duration resolution put the
/// path back into the state it held just before (a ghost event).
#[derive(Debug, Clone, PartialEq)]
pub struct PathEvent {
    pub time: f64,
    pub kind: EventKind,
    pub state: StructuredPartition,
    pub same_state: bool,
}

/// A simulated trajectory: the initial state and the ordered event records.
/// Times are non-decreasing; a collision and its scatter resolution share a
/// time stamp. The unstructured block count never increases along the path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub initial: StructuredPartition,
    pub events: Vec<PathEvent>,
    /// Time up to which the path is known: the stop horizon, or the final
    /// event time when the run stopped on absorption.
    pub end_time: f64,
}

impl PathSample {
    /// State occupied at time `t` (the latest record with time <= t; ties
    /// resolve to the last record of that instant).
    pub fn state_at(&self, t: f64) -> &StructuredPartition {
        let mut current = &self.initial;
        for event in &self.events {
            if event.time > t {
                break;
            }
            current = &event.state;
        }
        current
    }

    pub fn final_state(&self) -> &StructuredPartition {
        self.events.last().map(|e| &e.state).unwrap_or(&self.initial)
    }

    /// CSV rendering: header `time,kind,partition`, one row per record,
    /// preceded by a row of kind `initial` for the starting state.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time", "kind", "partition"]).expect("in-memory write");
        w.write_record(["0", "initial", &self.initial.to_string()]).expect("in-memory write");
        for event in &self.events {
            w.write_record([
                event.time.to_string().as_str(),
                event.kind.as_str(),
                &event.state.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// A finitely supported probability distribution with canonical (sorted,
/// deduplicated) support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution<T> {
    items: Vec<(T, f64)>,
}

impl<T: Ord> DiscreteDistribution<T> {
    /// Builds from (value, probability) pairs: duplicates are merged, exact
    /// zeros dropped, and the total must be 1 within 1e-12.
    pub fn new(raw: Vec<(T, f64)>) -> Result<Self, SimError> {
        let mut merged: BTreeMap<T, f64> = BTreeMap::new();
        for (value, p) in raw {
            if !(p.is_finite() && p >= 0.0) {
                return Err(SimError::BadProbability { p });
            }
            *merged.entry(value).or_insert(0.0) += p;
        }
        let items: Vec<(T, f64)> = merged.into_iter().filter(|&(_, p)| p > 0.0).collect();
        if items.is_empty() {
            return Err(SimError::EmptySupport);
        }
        let sum: f64 = items.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SimError::NotNormalized { sum });
        }
        Ok(DiscreteDistribution { items })
    }

    pub fn point_mass(value: T) -> Self {
        DiscreteDistribution { items: vec![(value, 1.0)] }
    }

    pub fn probability(&self, value: &T) -> f64 {
        match self.items.binary_search_by(|(v, _)| v.cmp(value)) {
            Ok(i) => self.items[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&T, f64)> {
        self.items.iter().map(|(v, p)| (v, *p))
    }

    pub fn support_size(&self) -> usize {
        self.items.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &T {
        let weights: Vec<f64> = self.items.iter().map(|(_, p)| *p).collect();
        &self.items[pick_weighted(rng, &weights)].0
    }

    /// Pushforward under `f`: probabilities of values with equal image add.
    pub fn map<U: Ord, F: Fn(&T) -> U>(&self, f: F) -> DiscreteDistribution<U> {
        let mut merged: BTreeMap<U, f64> = BTreeMap::new();
        for (v, p) in &self.items {
            *merged.entry(f(v)).or_insert(0.0) += p;
        }
        DiscreteDistribution { items: merged.into_iter().collect() }
    }
}

/// Index into `weights` drawn proportionally to the weights.
pub(crate) fn pick_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite(), "weights must have positive total");
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    // Floating rounding can leave a sliver past the last weight.
    weights.len() - 1
}

/// When to stop a simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Run until the given time; the final state persists to the horizon.
    Horizon(f64),
    /// Run until a single lineage remains (or no event can happen).
    UntilMrca,
}

fn check_stop(stop: StopRule) -> Result<(), SimError> {
    if let StopRule::Horizon(t) = stop {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SimError::BadHorizon { t });
        }
    }
    Ok(())
}

/// Jump chain of the within-deme dynamics run to absorption: the sequence
/// of states visited after `state`, ending in a scattered state. Holding
/// times are irrelevant to the final state and are not drawn.
fn fast_jump_chain<R: Rng + ?Sized>(
    params: &ModelParams,
    state: &StructuredPartition,
    rng: &mut R,
) -> Result<Vec<StructuredPartition>, SimError> {
    let mut steps = Vec::new();
    let mut current = state.clone();
    while !current.is_scattered() {
        let row = fast_rates(params, &current)?;
        assert!(!row.is_empty(), "crowded states always have an exit under valid parameters");
        let weights: Vec<f64> = row.iter().map(|(_, r)| *r).collect();
        let (target, _) = row.into_iter().nth(pick_weighted(rng, &weights)).expect("index in row");
        steps.push(target.clone());
        current = target;
        // Every jump merges blocks or occupies a fresh deme, so the chain
        // length never exceeds the number of lineages.
        assert!(steps.len() <= state.n() as usize, "absorption takes at most n jumps");
    }
    Ok(steps)
}

/// Final state of the within-deme dynamics started at `state`: scattered,
/// reached in at most n jumps.
pub fn run_fast_to_absorption<R: Rng + ?Sized>(
    state: &StructuredPartition,
    params: &ModelParams,
    rng: &mut R,
) -> Result<StructuredPartition, SimError> {
    let steps = fast_jump_chain(params, state, rng)?;
    Ok(steps.into_iter().last().unwrap_or_else(|| state.clone()))
}

/// Timed simulation of the within-deme dynamics up to `horizon` (the
/// process freezes on reaching a scattered state).
pub fn simulate_fast_process<R: Rng + ?Sized>(
    initial: &StructuredPartition,
    params: &ModelParams,
    horizon: f64,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    params.validate()?;
    check_stop(StopRule::Horizon(horizon))?;
    let mut events = Vec::new();
    let mut state = initial.clone();
    let mut t = 0.0;
    while !state.is_scattered() {
        let row = fast_rates(params, &state)?;
        assert!(!row.is_empty(), "crowded states always have an exit under valid parameters");
        let weights: Vec<f64> = row.iter().map(|(_, r)| *r).collect();
        let total: f64 = weights.iter().sum();
        t += Exp::new(total).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        let (target, _) = row.into_iter().nth(pick_weighted(rng, &weights)).expect("index in row");
        let kind = if target.block_count() < state.block_count() {
            EventKind::FastMerge
        } else {
            EventKind::FastMove
        };
        events.push(PathEvent { time: t, kind, state: target.clone(), same_state: false });
        state = target;
    }
    Ok(PathSample { initial: initial.clone(), events, end_time: horizon })
}

/// Simulation of the limiting slow process: exponential waits between
/// collisions drawn from the exact slow rates, each collision resolved by a
/// zero-duration scatter phase recorded at the collision's time stamp.
/// A crowded initial state is scattered at time 0 first.
pub fn simulate_limit_process<R: Rng + ?Sized>(
    initial: &StructuredPartition,
    params: &ModelParams,
    stop: StopRule,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    params.validate()?;
    check_stop(stop)?;
    let mut events: Vec<PathEvent> = Vec::new();
    let mut state = initial.clone();
    let mut t = 0.0;
    if !state.is_scattered() {
        for step in fast_jump_chain(params, &state, rng)? {
            events.push(PathEvent {
                time: 0.0,
                kind: EventKind::InstantaneousScatter,
                state: step.clone(),
                same_state: false,
            });
            state = step;
        }
    }
    loop {
        if state.block_count() == 1 {
            break;
        }
        let entries = slow_rates(params, &state)?;
        let weights: Vec<f64> = entries.iter().map(|e| e.rate).collect();
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            // No collision can ever happen again; the path is frozen.
            break;
        }
        let next = t + Exp::new(total).expect("positive rate").sample(rng);
        if let StopRule::Horizon(h) = stop {
            if next > h {
                break;
            }
        }
        t = next;
        let entry = &entries[pick_weighted(rng, &weights)];
        let kind = match entry.kind {
            crate::collisions::SlowEventKind::Extinction(_) => EventKind::ExtinctionCollision,
            crate::collisions::SlowEventKind::SimpleCollision { .. } => EventKind::SimpleCollision,
        };
        let scatter = fast_jump_chain(params, &entry.outcome, rng)?;
        let settled = scatter.last().unwrap_or(&entry.outcome).clone();
        let ghost = settled == state;
        events.push(PathEvent { time: t, kind, state: entry.outcome.clone(), same_state: ghost });
        for step in scatter {
            events.push(PathEvent {
                time: t,
                kind: EventKind::InstantaneousScatter,
                state: step,
                same_state: ghost,
            });
        }
        state = settled;
    }
    let end_time = match stop {
        StopRule::Horizon(h) => h,
        StopRule::UntilMrca => t,
    };
    Ok(PathSample { initial: initial.clone(), events, end_time })
}

fn scattered_from_blocks(n: u32, blocks: Vec<Vec<u32>>) -> StructuredPartition {
    let demes = blocks.into_iter().map(|b| vec![b]).collect();
    StructuredPartition::new(n, demes).expect("blocks partition the sample")
}

/// Reference single-merger coalescent on exchangeable (scattered) states,
/// run until one lineage remains. Merger events are labeled `fast-merge`.
pub fn simulate_lambda_coalescent<R: Rng + ?Sized>(
    measure: &MeasureOnUnitInterval,
    n: u32,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    let initial = StructuredPartition::scattered_singletons(n);
    let mut blocks: Vec<Vec<u32>> = initial.blocks().cloned().collect();
    let mut events = Vec::new();
    let mut t = 0.0;
    while blocks.len() > 1 {
        let b = blocks.len() as u32;
        // One weight per merge size k; each k-merge applies to (b choose k)
        // interchangeable block subsets.
        let mut weights = Vec::with_capacity(b as usize - 1);
        for k in 2..=b {
            weights.push(
                crate::comb::binomial(b as u64, k as u64) as f64 * lambda_rate(measure, b, k)?,
            );
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(rng);
        let k = 2 + pick_weighted(rng, &weights);
        let chosen = rand::seq::index::sample(rng, blocks.len(), k).into_vec();
        merge_block_indices(&mut blocks, &chosen);
        let state = scattered_from_blocks(n, blocks.clone());
        events.push(PathEvent { time: t, kind: EventKind::FastMerge, state, same_state: false });
    }
    Ok(PathSample { initial, events, end_time: t })
}

/// Reference simultaneous-merger coalescent on exchangeable (scattered)
/// states, run until one lineage remains.
pub fn simulate_xi_coalescent<R: Rng + ?Sized>(
    measure: &XiMeasure,
    n: u32,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    let initial = StructuredPartition::scattered_singletons(n);
    let mut blocks: Vec<Vec<u32>> = initial.blocks().cloned().collect();
    let mut events = Vec::new();
    let mut t = 0.0;
    while blocks.len() > 1 {
        let b = blocks.len() as u32;
        // One weight per multiset of merge-group sizes; the count of
        // concrete groupings multiplies the per-transition rate.
        let mut specs: Vec<(Vec<u32>, u128)> = Vec::new();
        for k in 2..=b {
            for sizes in integer_partitions(k, 2) {
                let mut profile = sizes.clone();
                profile.extend(std::iter::repeat(1).take((b - k) as usize));
                specs.push((sizes, crate::comb::profile_partition_count(&profile)));
            }
        }
        let mut weights = Vec::with_capacity(specs.len());
        for (sizes, count) in &specs {
            weights.push(*count as f64 * xi_rate(measure, b, sizes)?);
        }
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            break;
        }
        t += Exp::new(total).expect("positive rate").sample(rng);
        let (sizes, _) = &specs[pick_weighted(rng, &weights)];
        // Uniform concrete grouping with the drawn sizes: the untouched
        // blocks enter the profile as singleton parts.
        let mut profile = sizes.clone();
        profile.extend(std::iter::repeat(1).take((b - k_of(sizes)) as usize));
        let indices: Vec<usize> = (0..blocks.len()).collect();
        let groupings = partitions_with_profile(&indices, &profile);
        let grouping = &groupings[rng.random_range(0..groupings.len())];
        for group in grouping {
            if group.len() >= 2 {
                merge_block_indices_keep(&mut blocks, group);
            }
        }
        blocks.retain(|b| !b.is_empty());
        let state = scattered_from_blocks(n, blocks.clone());
        events.push(PathEvent { time: t, kind: EventKind::FastMerge, state, same_state: false });
    }
    Ok(PathSample { initial, events, end_time: t })
}

fn k_of(sizes: &[u32]) -> u32 {
    sizes.iter().sum()
}

/// Replaces the blocks at `indices` by their union (placed at the smallest
/// index), removing the rest.
fn merge_block_indices(blocks: &mut Vec<Vec<u32>>, indices: &[usize]) {
    merge_block_indices_keep(blocks, indices);
    blocks.retain(|b| !b.is_empty());
}

/// Same as `merge_block_indices` but leaves emptied slots in place so other
/// index groups stay valid; the caller sweeps them afterwards.
fn merge_block_indices_keep(blocks: &mut [Vec<u32>], indices: &[usize]) {
    let target = *indices.iter().min().expect("nonempty merge group");
    let mut union = Vec::new();
    for &i in indices {
        union.append(&mut blocks[i]);
    }
    union.sort_unstable();
    blocks[target] = union;
}

/// Exact distribution of the scattered state reached by the within-deme
/// dynamics from `state`, solved by first-step recursion over the (acyclic)
/// transition graph. Sample sizes up to 6 only.
pub fn absorption_distribution_exact(
    state: &StructuredPartition,
    params: &ModelParams,
) -> Result<DiscreteDistribution<StructuredPartition>, SimError> {
    if state.n() > EXACT_MAX {
        return Err(SimError::TooLarge { n: state.n(), max: EXACT_MAX });
    }
    let mut memo = BTreeMap::new();
    let dist = absorption_probabilities(params, state, &mut memo)?;
    DiscreteDistribution::new(dist.into_iter().collect())
}

/// First-step absorption recursion shared with the exact transient solver.
/// Merges strictly coarsen and moves strictly raise the deme count, so the
/// recursion terminates without cycle handling.
pub(crate) fn absorption_probabilities(
    params: &ModelParams,
    state: &StructuredPartition,
    memo: &mut BTreeMap<StructuredPartition, BTreeMap<StructuredPartition, f64>>,
) -> Result<BTreeMap<StructuredPartition, f64>, SimError> {
    if state.is_scattered() {
        let mut point = BTreeMap::new();
        point.insert(state.clone(), 1.0);
        return Ok(point);
    }
    if let Some(hit) = memo.get(state) {
        return Ok(hit.clone());
    }
    let row = fast_rates(params, state)?;
    let total: f64 = row.iter().map(|(_, r)| r).sum();
    assert!(total > 0.0, "crowded states always have an exit under valid parameters");
    let mut dist: BTreeMap<StructuredPartition, f64> = BTreeMap::new();
    for (target, rate) in row {
        let sub = absorption_probabilities(params, &target, memo)?;
        let p = rate / total;
        for (absorbed, q) in sub {
            *dist.entry(absorbed).or_insert(0.0) += p * q;
        }
    }
    memo.insert(state.clone(), dist.clone());
    Ok(dist)
}

/// Exact expected time for the within-deme dynamics to reach a scattered
/// state from `state`. Sample sizes up to 6 only.
pub fn mean_absorption_time_exact(
    state: &StructuredPartition,
    params: &ModelParams,
) -> Result<f64, SimError> {
    if state.n() > EXACT_MAX {
        return Err(SimError::TooLarge { n: state.n(), max: EXACT_MAX });
    }
    fn solve(
        params: &ModelParams,
        state: &StructuredPartition,
        memo: &mut BTreeMap<StructuredPartition, f64>,
    ) -> Result<f64, SimError> {
        if state.is_scattered() {
            return Ok(0.0);
        }
        if let Some(&hit) = memo.get(state) {
            return Ok(hit);
        }
        let row = fast_rates(params, state)?;
        let total: f64 = row.iter().map(|(_, r)| r).sum();
        assert!(total > 0.0, "crowded states always have an exit under valid parameters");
        let mut value = 1.0 / total;
        for (target, rate) in row {
            value += rate / total * solve(params, &target, memo)?;
        }
        memo.insert(state.clone(), value);
        Ok(value)
    }
    solve(params, state, &mut BTreeMap::new())
}
