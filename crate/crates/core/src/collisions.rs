//! Extinction-driven gathering events of the slow dynamics: their shapes,
//! exact rates, concrete realizations on a scattered state, and the
//! consistency check tying rates across sample sizes.

use serde::{Deserialize, Serialize};

use crate::comb::{
    binomial, combinations, factorial, falling, integer_partitions, partitions_with_profile,
    profile_partition_count,
};
use crate::partitions::StructuredPartition;
use crate::rates::{ModelParams, RateError};

/// One destination deme of a gathering event: how many lineages land there
/// and the sizes of the classes that merge on arrival (descending, summing
/// to `size`; a class of size 1 stays a separate lineage).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupPattern {
    pub size: u32,
    pub merge_sizes: Vec<u32>,
}

impl GroupPattern {
    pub fn new(size: u32, mut merge_sizes: Vec<u32>) -> Result<Self, RateError> {
        if size == 0
            || merge_sizes.is_empty()
            || merge_sizes.iter().any(|&l| l == 0)
            || merge_sizes.iter().sum::<u32>() != size
        {
            return Err(RateError::BadGroupSizes { b: size, sizes: merge_sizes });
        }
        merge_sizes.sort_unstable_by(|a, b| b.cmp(a));
        Ok(GroupPattern { size, merge_sizes })
    }

    fn singleton() -> Self {
        GroupPattern { size: 1, merge_sizes: vec![1] }
    }

    /// Number of merge classes the landed lineages split into.
    pub fn class_count(&self) -> usize {
        self.merge_sizes.len()
    }
}

/// Shape of a gathering event on a state of `total` lineages, one per deme:
/// the group sizes landing together with their merge patterns, singletons
/// included, in canonical (descending) order. At least one group has two or
/// more lineages.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CollisionType {
    total: u32,
    groups: Vec<GroupPattern>,
}

impl CollisionType {
    pub fn new(total: u32, mut groups: Vec<GroupPattern>) -> Result<Self, RateError> {
        let sum: u32 = groups.iter().map(|g| g.size).sum();
        if sum != total || !groups.iter().any(|g| g.size >= 2) {
            return Err(RateError::BadGroupSizes {
                b: total,
                sizes: groups.iter().map(|g| g.size).collect(),
            });
        }
        groups.sort_unstable_by(|a, b| b.cmp(a));
        Ok(CollisionType { total, groups })
    }

    /// Number of lineages in the state the event acts on.
    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn groups(&self) -> &[GroupPattern] {
        &self.groups
    }

    /// Groups gathering at least two lineages.
    pub fn genuine_groups(&self) -> impl Iterator<Item = &GroupPattern> {
        self.groups.iter().filter(|g| g.size >= 2)
    }
}

/// A concrete realization of a collision type on a scattered state: for the
/// group at each position of the type, the lineage indices of each merge
/// class (indices follow the canonical block order of the state).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionAssignment {
    pub groups: Vec<Vec<Vec<usize>>>,
}

/// A gathering event, optionally pinned to concrete lineages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub ty: CollisionType,
    pub assignment: Option<CollisionAssignment>,
}

/// Number of ways to split `k` labeled lineages into unordered groups of the
/// given sizes (multinomial divided by the factorials of the size
/// multiplicities).
pub fn gathering_multiplicity(sizes: &[u32]) -> u128 {
    profile_partition_count(sizes)
}

/// Number of concrete realizations of a collision type: unordered groups
/// counted up to swapping groups of identical size and pattern, times the
/// number of ways each group splits into its merge classes. Groups of equal
/// size but different patterns are distinguishable, so only exact
/// duplicates are quotiented out.
pub fn collision_multiplicity(ty: &CollisionType) -> u128 {
    let mut count = factorial(ty.total as u64);
    for g in &ty.groups {
        count /= factorial(g.size as u64);
    }
    let mut i = 0;
    while i < ty.groups.len() {
        let mut j = i + 1;
        while j < ty.groups.len() && ty.groups[j] == ty.groups[i] {
            j += 1;
        }
        count /= factorial((j - i) as u64);
        i = j;
    }
    for g in &ty.groups {
        count *= profile_partition_count(&g.merge_sizes);
    }
    count
}

/// All collision types on a state of `m` lineages whose genuine groups fit
/// into `num_sources` destination demes, with their multiplicities. Types
/// pad the ungathered lineages as singleton groups so group sizes sum to m.
pub fn enumerate_collisions(m: u32, num_sources: u32) -> Vec<(CollisionType, u128)> {
    let mut out = Vec::new();
    for k in 2..=m {
        for sizes in integer_partitions(k, 2) {
            if sizes.len() as u32 > num_sources {
                continue;
            }
            // Patterns per size class are an unordered multiset: enumerate
            // non-decreasing choices among the patterns of that size.
            let mut classes: Vec<(u32, usize)> = Vec::new();
            for &s in &sizes {
                match classes.last_mut() {
                    Some((size, count)) if *size == s => *count += 1,
                    _ => classes.push((s, 1)),
                }
            }
            let per_class_patterns: Vec<Vec<Vec<u32>>> =
                classes.iter().map(|&(s, _)| integer_partitions(s, 1)).collect();
            let mut chosen: Vec<GroupPattern> = Vec::new();
            build_pattern_choices(&classes, &per_class_patterns, 0, &mut chosen, &mut |groups| {
                let mut all = groups.to_vec();
                for _ in 0..(m - k) {
                    all.push(GroupPattern::singleton());
                }
                let ty = CollisionType::new(m, all).expect("sizes sum to m by construction");
                let mult = collision_multiplicity(&ty);
                out.push((ty, mult));
            });
        }
    }
    out.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    out
}

fn build_pattern_choices(
    classes: &[(u32, usize)],
    per_class_patterns: &[Vec<Vec<u32>>],
    class_idx: usize,
    chosen: &mut Vec<GroupPattern>,
    emit: &mut dyn FnMut(&[GroupPattern]),
) {
    if class_idx == classes.len() {
        emit(chosen);
        return;
    }
    let (size, count) = classes[class_idx];
    let patterns = &per_class_patterns[class_idx];
    fn pick(
        size: u32,
        patterns: &[Vec<u32>],
        start: usize,
        left: usize,
        classes: &[(u32, usize)],
        per_class_patterns: &[Vec<Vec<u32>>],
        class_idx: usize,
        chosen: &mut Vec<GroupPattern>,
        emit: &mut dyn FnMut(&[GroupPattern]),
    ) {
        if left == 0 {
            build_pattern_choices(classes, per_class_patterns, class_idx + 1, chosen, emit);
            return;
        }
        for p in start..patterns.len() {
            chosen.push(GroupPattern { size, merge_sizes: patterns[p].clone() });
            pick(size, patterns, p, left - 1, classes, per_class_patterns, class_idx, chosen, emit);
            chosen.pop();
        }
    }
    pick(size, patterns, 0, count, classes, per_class_patterns, class_idx, chosen, emit);
}

/// Rate of one concrete realization of a collision type under the model:
/// the extinction rate times the integral over the wiped-out fraction of
/// the probability that exactly the right lineages are caught, grouped into
/// distinct source demes, and merged according to the patterns. Gathered
/// groups that need more distinct parents than a deme holds, or more source
/// demes than exist, get rate zero.
pub fn geo_collision_rate(params: &ModelParams, ty: &CollisionType) -> Result<f64, RateError> {
    let m = ty.total;
    let r = ty.genuine_groups().count() as u32;
    let k: u32 = ty.genuine_groups().map(|g| g.size).sum();
    let sources = params.num_sources;
    if r > sources {
        return Ok(0.0);
    }
    let deme_size = params.deme_size;
    let mut parent_choices = 1.0;
    for g in ty.genuine_groups() {
        parent_choices *= falling(deme_size as u64, g.class_count() as u64) as f64
            / (deme_size as f64).powi(g.size as i32);
    }
    if parent_choices == 0.0 {
        return Ok(0.0);
    }
    let singles = m - k;
    let mut total = 0.0;
    for s in 0..=singles.min(sources - r) {
        // s lineages besides the gathered ones are caught by the extinction
        // but land alone, in source demes distinct from the r group targets.
        let caught = binomial(singles as u64, s as u64) as f64
            * params.extinction_measure.moment(k + s, singles - s)?;
        let placement = falling(sources as u64, (r + s) as u64) as f64
            / (sources as f64).powi((k + s) as i32);
        total += caught * placement;
    }
    Ok(params.extinction_rate * total * parent_choices)
}

/// Full model rate of one concrete collision: the extinction-driven rate
/// plus, when the event gathers exactly one pair, the migration channel in
/// which one of the two lineages lands in the other's deme (merging on
/// arrival or not).
pub fn collision_rate(params: &ModelParams, ty: &CollisionType) -> Result<f64, RateError> {
    let mut rate = geo_collision_rate(params, ty)?;
    let genuine: Vec<&GroupPattern> = ty.genuine_groups().collect();
    if genuine.len() == 1 && genuine[0].size == 2 {
        let n = params.deme_size as f64;
        let migration = 2.0 * params.migration_rate / n;
        rate += if genuine[0].class_count() == 1 { migration } else { migration * (n - 1.0) };
    }
    Ok(rate)
}

/// All concrete realizations of a collision type on lineage indices
/// 0..total, in the group order of the type. Groups identical in size and
/// pattern are unordered among themselves; everything else is ordered.
pub fn enumerate_assignments(ty: &CollisionType) -> Vec<CollisionAssignment> {
    // Classes of consecutive identical groups (the list is sorted).
    let mut classes: Vec<(GroupPattern, usize)> = Vec::new();
    for g in &ty.groups {
        match classes.last_mut() {
            Some((pat, count)) if pat == g => *count += 1,
            _ => classes.push((g.clone(), 1)),
        }
    }
    let pool: Vec<usize> = (0..ty.total as usize).collect();
    let mut splits: Vec<Vec<Vec<usize>>> = Vec::new();
    split_into_classes(&pool, &classes, &mut Vec::new(), &mut splits);
    let mut out = Vec::new();
    for groups in splits {
        // Independently split every group into its merge classes.
        let per_group: Vec<Vec<Vec<Vec<usize>>>> = groups
            .iter()
            .zip(&ty.groups)
            .map(|(indices, pattern)| partitions_with_profile(indices, &pattern.merge_sizes))
            .collect();
        let mut current: Vec<Vec<Vec<usize>>> = Vec::new();
        cartesian(&per_group, 0, &mut current, &mut |groups| {
            out.push(CollisionAssignment { groups: groups.to_vec() });
        });
    }
    out
}

fn split_into_classes(
    pool: &[usize],
    classes: &[(GroupPattern, usize)],
    acc: &mut Vec<Vec<usize>>,
    out: &mut Vec<Vec<Vec<usize>>>,
) {
    match classes.split_first() {
        None => out.push(acc.clone()),
        Some(((pattern, count), rest)) => {
            let take = pattern.size as usize * count;
            for chosen in combinations(pool, take) {
                let remaining: Vec<usize> =
                    pool.iter().copied().filter(|x| !chosen.contains(x)).collect();
                // The class elements split into `count` unordered groups of
                // equal size; a profile of equal sizes anchors each group at
                // its least element, avoiding permuted duplicates.
                for split in
                    partitions_with_profile(&chosen, &vec![pattern.size; *count])
                {
                    let added = split.len();
                    acc.extend(split);
                    split_into_classes(&remaining, rest, acc, out);
                    acc.truncate(acc.len() - added);
                }
            }
        }
    }
}

fn cartesian(
    options: &[Vec<Vec<Vec<usize>>>],
    idx: usize,
    current: &mut Vec<Vec<Vec<usize>>>,
    emit: &mut dyn FnMut(&[Vec<Vec<usize>>]),
) {
    if idx == options.len() {
        emit(current);
        return;
    }
    for choice in &options[idx] {
        current.push(choice.clone());
        cartesian(options, idx + 1, current, emit);
        current.pop();
    }
}

/// Immediate outcome of a concrete collision on a scattered state: each
/// group's merge classes collapse into single blocks sharing one deme, and
/// every other lineage keeps its own deme. The result may be crowded and is
/// resolved by the fast within-deme dynamics afterwards.
pub fn apply_collision(
    state: &StructuredPartition,
    event: &CollisionEvent,
) -> Result<StructuredPartition, RateError> {
    if !state.is_scattered() {
        return Err(RateError::NotScattered);
    }
    let assignment = event.assignment.as_ref().expect("assignment required to apply");
    let blocks: Vec<&Vec<u32>> = state.blocks().collect();
    assert_eq!(event.ty.total as usize, blocks.len(), "type size matches state");
    let mut demes: Vec<Vec<Vec<u32>>> = Vec::new();
    let mut used = vec![false; blocks.len()];
    for classes in &assignment.groups {
        let mut deme = Vec::new();
        for class in classes {
            let mut block = Vec::new();
            for &idx in class {
                block.extend(blocks[idx].iter().copied());
                used[idx] = true;
            }
            deme.push(block);
        }
        demes.push(deme);
    }
    for (idx, block) in blocks.iter().enumerate() {
        if !used[idx] {
            demes.push(vec![(*block).clone()]);
        }
    }
    Ok(StructuredPartition::new(state.n(), demes).expect("blocks form a valid state"))
}

/// What kind of slow-scale event an entry describes.
#[derive(Debug, Clone, PartialEq)]
pub enum SlowEventKind {
    /// Mass extinction gathering lineages into recolonizing demes.
    Extinction(CollisionEvent),
    /// One lineage of the pair lands in the other's deme, merging with it or
    /// not. Indices follow the canonical block order of the state.
    SimpleCollision { pair: [usize; 2], coalesced: bool },
}

/// One outgoing transition of the slow process from a scattered state.
#[derive(Debug, Clone)]
pub struct SlowEntry {
    pub kind: SlowEventKind,
    pub rate: f64,
    /// Immediate outcome, before the instantaneous scattering phase.
    pub outcome: StructuredPartition,
}

/// Every positive-rate slow transition out of a scattered state: all
/// concrete extinction-driven gatherings plus, for each unordered pair of
/// lineages, the two migration channels (merging on arrival or not).
pub fn slow_rates(
    params: &ModelParams,
    state: &StructuredPartition,
) -> Result<Vec<SlowEntry>, RateError> {
    if !state.is_scattered() {
        return Err(RateError::NotScattered);
    }
    let m = state.block_count() as u32;
    let mut entries = Vec::new();
    if params.extinction_rate > 0.0 && m >= 2 {
        for (ty, _mult) in enumerate_collisions(m, params.num_sources) {
            let rate = geo_collision_rate(params, &ty)?;
            if rate == 0.0 {
                continue;
            }
            for assignment in enumerate_assignments(&ty) {
                let event = CollisionEvent { ty: ty.clone(), assignment: Some(assignment) };
                let outcome = apply_collision(state, &event)?;
                entries.push(SlowEntry { kind: SlowEventKind::Extinction(event), rate, outcome });
            }
        }
    }
    if params.migration_rate > 0.0 && params.deme_size >= 1 {
        let blocks: Vec<&Vec<u32>> = state.blocks().collect();
        let n = params.deme_size as f64;
        for i in 0..blocks.len() {
            for j in (i + 1)..blocks.len() {
                let mut merged: Vec<u32> =
                    blocks[i].iter().chain(blocks[j].iter()).copied().collect();
                merged.sort_unstable();
                let mut demes = vec![vec![merged]];
                let mut gathered = vec![vec![blocks[i].clone(), blocks[j].clone()]];
                for (idx, block) in blocks.iter().enumerate() {
                    if idx != i && idx != j {
                        demes.push(vec![(*block).clone()]);
                        gathered.push(vec![(*block).clone()]);
                    }
                }
                let coalesced = StructuredPartition::new(state.n(), demes)
                    .expect("merging two blocks keeps a valid state");
                entries.push(SlowEntry {
                    kind: SlowEventKind::SimpleCollision { pair: [i, j], coalesced: true },
                    rate: 2.0 * params.migration_rate / n,
                    outcome: coalesced,
                });
                if params.deme_size > 1 {
                    let side_by_side = StructuredPartition::new(state.n(), gathered)
                        .expect("gathering two blocks keeps a valid state");
                    entries.push(SlowEntry {
                        kind: SlowEventKind::SimpleCollision { pair: [i, j], coalesced: false },
                        rate: 2.0 * params.migration_rate * (n - 1.0) / n,
                        outcome: side_by_side,
                    });
                }
            }
        }
    }
    Ok(entries)
}

/// Children of a collision type under one extra lineage: the new lineage
/// joins group `u` inside merge class `j`, or as a new class (`j` equal to
/// the class count), per the sampling-consistency recursion.
fn bump(ty: &CollisionType, u: usize, j: usize) -> CollisionType {
    let mut groups = ty.groups.clone();
    let mut sizes = groups[u].merge_sizes.clone();
    if j < sizes.len() {
        sizes[j] += 1;
    } else {
        sizes.push(1);
    }
    groups[u] = GroupPattern::new(groups[u].size + 1, sizes).expect("bumped pattern stays valid");
    CollisionType::new(ty.total + 1, groups).expect("bumped type stays valid")
}

fn with_extra_singleton(ty: &CollisionType) -> CollisionType {
    let mut groups = ty.groups.clone();
    groups.push(GroupPattern::singleton());
    CollisionType::new(ty.total + 1, groups).expect("extra singleton keeps the type valid")
}

/// Worst violation of the sampling-consistency recursion for a per-type
/// rate function: the rate of a type on k lineages must equal the sum over
/// all placements of lineage k+1 (each merge class of each group, a new
/// class of each group, or a fresh singleton group) of the child rates.
fn max_collision_consistency_violation<F>(
    rate_fn: F,
    k_max: u32,
    num_sources: u32,
) -> Result<f64, RateError>
where
    F: Fn(&CollisionType) -> Result<f64, RateError>,
{
    const MAX: u32 = 6;
    if k_max > MAX {
        return Err(RateError::TooLarge { n: k_max, max: MAX });
    }
    let mut worst = 0.0f64;
    for k in 2..k_max {
        for (ty, _mult) in enumerate_collisions(k, num_sources) {
            let lhs = rate_fn(&ty)?;
            let mut rhs = rate_fn(&with_extra_singleton(&ty))?;
            for u in 0..ty.groups.len() {
                for j in 0..=ty.groups[u].merge_sizes.len() {
                    rhs += rate_fn(&bump(&ty, u, j))?;
                }
            }
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

/// Worst violation of the sampling-consistency recursion for the full model
/// rates (extinction plus migration channels) over all types with at most
/// `k_max` lineages (at most 6).
pub fn check_lambda_g_consistency(params: &ModelParams, k_max: u32) -> Result<f64, RateError> {
    max_collision_consistency_violation(
        |ty| collision_rate(params, ty),
        k_max,
        params.num_sources,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::set_partitions;
    use crate::measures::MeasureOnUnitInterval;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(deme_size: u32, num_sources: u32, m1: f64, e: f64) -> ModelParams {
        ModelParams {
            deme_size,
            num_sources,
            migration_rate: m1,
            extinction_rate: e,
            within_deme_measure: MeasureOnUnitInterval::dirac(0.5),
            extinction_measure: MeasureOnUnitInterval::dirac(0.5),
            deme_rate_scale: 1.0,
        }
    }

    fn ty(total: u32, groups: &[(u32, &[u32])]) -> CollisionType {
        let groups = groups
            .iter()
            .map(|&(size, sizes)| GroupPattern::new(size, sizes.to_vec()).unwrap())
            .collect();
        CollisionType::new(total, groups).unwrap()
    }

    #[test]
    fn unordered_group_counts_match_hand_values() {
        assert_eq!(gathering_multiplicity(&[2, 2]), 3, "pairings of four lineages");
        assert_eq!(gathering_multiplicity(&[2, 1]), 3);
        assert_eq!(gathering_multiplicity(&[3, 2]), 10);
        assert_eq!(gathering_multiplicity(&[1, 1, 1]), 1);
    }

    #[test]
    fn equal_size_groups_with_distinct_patterns_are_distinguishable() {
        // Two pairs, one merging and one not: the pairing choice matters in
        // full, so the count is 6, not the 3 of indistinguishable pairs.
        let mixed = ty(4, &[(2, &[2]), (2, &[1, 1])]);
        assert_eq!(collision_multiplicity(&mixed), 6);
        assert_eq!(enumerate_assignments(&mixed).len(), 6);
        let both_merge = ty(4, &[(2, &[2]), (2, &[2])]);
        assert_eq!(collision_multiplicity(&both_merge), 3);
        assert_eq!(enumerate_assignments(&both_merge).len(), 3);
    }

    #[test]
    fn multiplicities_match_brute_force_outcome_enumeration() {
        // Oracle: enumerate every (grouping, per-group merge partition) of m
        // labeled lineages and count those realizing the type's multiset of
        // (size, merge profile) pairs.
        for m in 2..=5u32 {
            for (ty, mult) in enumerate_collisions(m, m) {
                let mut count = 0u128;
                for grouping in set_partitions(m as usize) {
                    let mut choices: Vec<Vec<Vec<Vec<usize>>>> = Vec::new();
                    for group in &grouping {
                        choices.push(set_partitions(group.len()).iter().map(|p| {
                            p.iter()
                                .map(|class| class.iter().map(|&i| group[i]).collect())
                                .collect()
                        }).collect());
                    }
                    let mut stack: Vec<Vec<Vec<usize>>> = Vec::new();
                    count += count_matching(&choices, 0, &mut stack, &ty);
                }
                assert_eq!(count, mult, "type {ty:?}");
                assert_eq!(enumerate_assignments(&ty).len() as u128, mult, "type {ty:?}");
            }
        }
    }

    fn count_matching(
        choices: &[Vec<Vec<Vec<usize>>>],
        idx: usize,
        stack: &mut Vec<Vec<Vec<usize>>>,
        target: &CollisionType,
    ) -> u128 {
        if idx == choices.len() {
            let mut shape: Vec<GroupPattern> = stack
                .iter()
                .map(|classes| {
                    let mut sizes: Vec<u32> = classes.iter().map(|c| c.len() as u32).collect();
                    sizes.sort_unstable_by(|a, b| b.cmp(a));
                    let size = sizes.iter().sum();
                    GroupPattern { size, merge_sizes: sizes }
                })
                .collect();
            shape.sort_unstable_by(|a, b| b.cmp(a));
            return (shape == target.groups) as u128;
        }
        let mut acc = 0;
        for choice in &choices[idx] {
            stack.push(choice.clone());
            acc += count_matching(choices, idx + 1, stack, target);
            stack.pop();
        }
        acc
    }

    #[test]
    fn pair_enumeration_lists_the_two_types() {
        let types = enumerate_collisions(2, 3);
        assert_eq!(types.len(), 2);
        let shapes: Vec<&CollisionType> = types.iter().map(|(t, _)| t).collect();
        assert!(shapes.contains(&&ty(2, &[(2, &[2])])), "gathered and merged");
        assert!(shapes.contains(&&ty(2, &[(2, &[1, 1])])), "gathered, not merged");
        assert!(types.iter().all(|&(_, m)| m == 1), "one pair, one realization each");
    }

    #[test]
    fn pair_gathering_rates_match_hand_substitution() {
        for (deme_size, num_sources, e) in [(1, 1, 1.0), (4, 2, 0.7), (10, 3, 2.5)] {
            let p = model(deme_size, num_sources, 0.0, e);
            let moment = p.extinction_measure.moment(2, 0).unwrap();
            let merged = geo_collision_rate(&p, &ty(2, &[(2, &[2])])).unwrap();
            let apart = geo_collision_rate(&p, &ty(2, &[(2, &[1, 1])])).unwrap();
            let n = deme_size as f64;
            let k = num_sources as f64;
            assert!((merged - e * moment / (k * n)).abs() < 1e-15);
            assert!((apart - e * moment * (n - 1.0) / (k * n)).abs() < 1e-15);
            assert!((merged + apart - e * moment / k).abs() < 1e-15, "pair gathering total");
        }
    }

    #[test]
    fn one_parent_slot_forces_full_merges() {
        let p = model(1, 2, 0.0, 1.0);
        for m in 2..=4 {
            for (ty, _) in enumerate_collisions(m, 2) {
                let rate = geo_collision_rate(&p, &ty).unwrap();
                let fully_merged = ty.genuine_groups().all(|g| g.class_count() == 1);
                assert_eq!(rate > 0.0, fully_merged, "type {ty:?}");
            }
        }
    }

    #[test]
    fn summing_rates_over_merge_patterns_drops_the_parent_factor() {
        // Law of total probability: for fixed gathered group sizes, the
        // pattern-weighted rates sum to the bare gathering rate.
        let p = model(3, 4, 0.0, 1.3);
        for m in 2..=5u32 {
            let mut by_sizes: std::collections::BTreeMap<Vec<u32>, f64> =
                std::collections::BTreeMap::new();
            for (ty, mult) in enumerate_collisions(m, 4) {
                let sizes: Vec<u32> = ty.genuine_groups().map(|g| g.size).collect();
                let per_gathering = mult as f64 / gathering_multiplicity(
                    &ty.groups.iter().map(|g| g.size).collect::<Vec<_>>(),
                ) as f64;
                *by_sizes.entry(sizes).or_insert(0.0) +=
                    per_gathering * geo_collision_rate(&p, &ty).unwrap();
            }
            for (sizes, total) in by_sizes {
                let r = sizes.len() as u32;
                let k: u32 = sizes.iter().sum();
                let singles = m - k;
                let mut want = 0.0;
                for s in 0..=singles.min(4 - r) {
                    want += binomial(singles as u64, s as u64) as f64
                        * p.extinction_measure.moment(k + s, singles - s).unwrap()
                        * falling(4, (r + s) as u64) as f64
                        / 4f64.powi((k + s) as i32);
                }
                want *= p.extinction_rate;
                assert!(
                    (total - want).abs() < 1e-12,
                    "sizes {sizes:?} at m={m}: {total} vs {want}"
                );
            }
        }
    }

    #[test]
    fn slow_transitions_out_of_a_scattered_pair() {
        let e_only = model(4, 2, 0.0, 1.0);
        let state: StructuredPartition = "1|2".parse().unwrap();
        let entries = slow_rates(&e_only, &state).unwrap();
        assert_eq!(entries.len(), 2);
        let total: f64 = entries.iter().map(|s| s.rate).sum();
        let moment = e_only.extinction_measure.moment(2, 0).unwrap();
        assert!((total - moment / 2.0).abs() < 1e-15, "pair gathering rate split in two");

        let m_only = model(4, 2, 0.6, 0.0);
        let entries = slow_rates(&m_only, &state).unwrap();
        assert_eq!(entries.len(), 2);
        for entry in &entries {
            match entry.kind {
                SlowEventKind::SimpleCollision { coalesced: true, .. } => {
                    assert!((entry.rate - 2.0 * 0.6 / 4.0).abs() < 1e-15);
                    assert_eq!(entry.outcome, "1,2".parse().unwrap());
                }
                SlowEventKind::SimpleCollision { coalesced: false, .. } => {
                    assert!((entry.rate - 2.0 * 0.6 * 3.0 / 4.0).abs() < 1e-15);
                    assert_eq!(entry.outcome, "1;2".parse().unwrap());
                }
                _ => panic!("no extinction entries expected"),
            }
        }
    }

    #[test]
    fn slow_rates_reject_crowded_states() {
        let p = model(4, 2, 0.1, 1.0);
        let crowded: StructuredPartition = "1;2|3".parse().unwrap();
        assert!(matches!(slow_rates(&p, &crowded), Err(RateError::NotScattered)));
    }

    #[test]
    fn outcomes_gather_groups_and_preserve_everyone_else() {
        let state: StructuredPartition = "1|2|3|4".parse().unwrap();
        let shape = ty(4, &[(3, &[2, 1]), (1, &[1])]);
        let assignments = enumerate_assignments(&shape);
        assert_eq!(assignments.len() as u128, collision_multiplicity(&shape));
        let event = CollisionEvent {
            ty: shape,
            assignment: Some(CollisionAssignment {
                groups: vec![vec![vec![0, 2], vec![3]], vec![vec![1]]],
            }),
        };
        let outcome = apply_collision(&state, &event).unwrap();
        assert_eq!(outcome, "1,3;4|2".parse().unwrap());
    }

    #[test]
    fn model_rates_satisfy_the_sampling_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
        for _ in 0..5 {
            let p = ModelParams {
                deme_size: rng.random_range(1..6),
                num_sources: rng.random_range(1..4),
                migration_rate: rng.random_range(0.0..1.0),
                extinction_rate: rng.random_range(0.1..2.0),
                within_deme_measure: MeasureOnUnitInterval::dirac(0.5),
                extinction_measure: MeasureOnUnitInterval::new(
                    vec![[rng.random_range(0.1..0.9), 0.4]],
                    vec![[2.0, rng.random_range(1.0..4.0), 0.6]],
                )
                .unwrap(),
                deme_rate_scale: 1.0,
            };
            let violation = check_lambda_g_consistency(&p, 5).unwrap();
            assert!(violation < 1e-10, "violation {violation} for {p:?}");
        }
    }

    #[test]
    fn recursion_check_flags_a_perturbed_rate() {
        let p = model(3, 2, 0.2, 1.0);
        let skewed = ty(3, &[(2, &[2]), (1, &[1])]);
        let violation = max_collision_consistency_violation(
            |t| {
                let r = collision_rate(&p, t)?;
                Ok(if *t == skewed { 1.1 * r } else { r })
            },
            4,
            2,
        )
        .unwrap();
        assert!(violation > 1e-4, "perturbation went unnoticed: {violation}");
    }

    #[test]
    fn spelled_out_pair_recursion_on_three_lineages() {
        let p = model(4, 2, 0.3, 1.2);
        let lhs = collision_rate(&p, &ty(2, &[(2, &[2])])).unwrap();
        let rhs = collision_rate(&p, &ty(3, &[(3, &[3])])).unwrap()
            + collision_rate(&p, &ty(3, &[(3, &[2, 1])])).unwrap()
            + collision_rate(&p, &ty(3, &[(2, &[2]), (1, &[1])])).unwrap();
        assert!((lhs - rhs).abs() < 1e-15, "{lhs} vs {rhs}");
    }
}
