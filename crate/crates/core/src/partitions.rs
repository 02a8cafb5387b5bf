//! Structured partitions: blocks of {1..n} grouped into exchangeable demes.
//!
//! A structured partition is a partition of the sample {1..n} into blocks,
//! together with a grouping of those blocks into demes. Demes carry no labels,
//! so two states that differ only by deme relabelling are the same value.
//! Canonical form: elements ascending within a block, blocks within a deme
//! ordered by least element, demes ordered by the least element of their first
//! block, empty demes dropped. Values are immutable; every operation returns a
//! new partition.
//!
//! Text encoding: `,` separates elements, `;` separates blocks within a deme,
//! `|` separates demes. `1;2|3,4|5` is three demes: one holding blocks {1} and
//! {2}, one holding {3,4}, one holding {5}.

use crate::comb::{bell_numbers, set_partitions};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("element {element} appears in more than one block")]
    DuplicateElement { element: u32 },
    #[error("element {element} is outside the sample range 1..={n}")]
    OutOfRange { element: u32, n: u32 },
    #[error("element {element} is missing from the partition of 1..={n}")]
    MissingElement { element: u32, n: u32 },
    #[error("deme {deme} contains an empty block")]
    EmptyBlock { deme: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("deme index {deme} out of bounds ({demes} demes)")]
    BadDeme { deme: usize, demes: usize },
    #[error("block index {block} out of bounds in deme {deme} ({blocks} blocks)")]
    BadBlock { deme: usize, block: usize, blocks: usize },
    #[error("merging needs at least two distinct blocks, got {got}")]
    TooFewBlocks { got: usize },
    #[error("restriction size {m} must lie in 1..={n}")]
    BadRestriction { m: u32, n: u32 },
    #[error("enumeration supports n <= {max}, got {n}; use Monte Carlo instead")]
    TooLargeToEnumerate { n: u32, max: u32 },
    #[error("cannot parse partition text: {reason}")]
    Parse { reason: String },
}

/// Where a moved block lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    /// An existing deme, by canonical index.
    Existing(usize),
    /// A previously empty deme.
    Fresh,
}

/// Multiset of block counts per occupied deme, sorted descending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OccupancyProfile(Vec<u32>);

impl OccupancyProfile {
    pub fn new(mut counts: Vec<u32>) -> Self {
        counts.retain(|&c| c > 0);
        counts.sort_unstable_by(|a, b| b.cmp(a));
        OccupancyProfile(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    pub fn total_blocks(&self) -> u32 {
        self.0.iter().sum()
    }

    /// True when no deme holds more than one block.
    pub fn is_scattered(&self) -> bool {
        self.0.iter().all(|&c| c == 1)
    }
}

impl fmt::Display for OccupancyProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strs: Vec<String> = self.0.iter().map(|x| x.to_string()).collect();
        write!(f, "{}", strs.join(","))
    }
}

/// Partition of {1..n} into blocks, no deme structure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnstructuredPartition {
    n: u32,
    blocks: Vec<Vec<u32>>,
}

impl UnstructuredPartition {
    pub fn new(n: u32, blocks: Vec<Vec<u32>>) -> Result<Self, PartitionError> {
        // Reuse the structured validator with every block in its own deme.
        let sp = StructuredPartition::new(n, blocks.into_iter().map(|b| vec![b]).collect())?;
        Ok(sp.unstructured())
    }

    pub fn singletons(n: u32) -> Self {
        StructuredPartition::scattered_singletons(n).unstructured()
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn blocks(&self) -> &[Vec<u32>] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Descending multiset of block sizes.
    pub fn size_profile(&self) -> Vec<u32> {
        let mut sizes: Vec<u32> = self.blocks.iter().map(|b| b.len() as u32).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    /// Merge the blocks at the given indices into one.
    pub fn merge_blocks(&self, indices: &[usize]) -> Result<Self, PartitionError> {
        let sp = self.as_scattered();
        let merged = merge_across(&sp, indices)?;
        Ok(merged.unstructured())
    }

    /// Restriction to {1..m}: drop larger elements, then empty blocks.
    pub fn restrict(&self, m: u32) -> Result<Self, PartitionError> {
        Ok(self.as_scattered().restrict(m)?.unstructured())
    }

    /// The scattered structured partition with these blocks, one per deme.
    pub fn as_scattered(&self) -> StructuredPartition {
        StructuredPartition::new(self.n, self.blocks.iter().map(|b| vec![b.clone()]).collect())
            .expect("blocks of a valid partition stay valid")
    }
}

impl fmt::Display for UnstructuredPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<String> = self
            .blocks
            .iter()
            .map(|b| {
                b.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
            })
            .collect();
        write!(f, "{}", blocks.join(";"))
    }
}

impl FromStr for UnstructuredPartition {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let blocks = parse_blocks(s)?;
        let n = max_element(&blocks);
        UnstructuredPartition::new(n, blocks)
    }
}

/// Partition of {1..n} with blocks grouped into unlabelled demes.
/// Always held in canonical form, so derived equality and ordering are
/// equality and a total order on the quotient values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StructuredPartition {
    n: u32,
    demes: Vec<Vec<Vec<u32>>>,
}

impl StructuredPartition {
    /// Canonicalize raw demes-of-blocks input. Rejects duplicate, missing and
    /// out-of-range elements and empty blocks; drops empty demes.
    pub fn new(n: u32, demes: Vec<Vec<Vec<u32>>>) -> Result<Self, PartitionError> {
        if n == 0 {
            return Err(PartitionError::EmptySample);
        }
        let mut seen = vec![false; n as usize + 1];
        for (d, deme) in demes.iter().enumerate() {
            for block in deme {
                if block.is_empty() {
                    return Err(PartitionError::EmptyBlock { deme: d });
                }
                for &e in block {
                    if e == 0 || e > n {
                        return Err(PartitionError::OutOfRange { element: e, n });
                    }
                    if seen[e as usize] {
                        return Err(PartitionError::DuplicateElement { element: e });
                    }
                    seen[e as usize] = true;
                }
            }
        }
        if let Some(missing) = (1..=n).find(|&e| !seen[e as usize]) {
            return Err(PartitionError::MissingElement { element: missing, n });
        }
        let mut demes: Vec<Vec<Vec<u32>>> = demes.into_iter().filter(|d| !d.is_empty()).collect();
        for deme in &mut demes {
            for block in deme.iter_mut() {
                block.sort_unstable();
            }
            deme.sort_unstable_by_key(|b| b[0]);
        }
        demes.sort_unstable_by_key(|d| d[0][0]);
        Ok(StructuredPartition { n, demes })
    }

    /// All n sample elements as singleton blocks sharing one deme.
    pub fn singletons_in_one_deme(n: u32) -> Self {
        let deme: Vec<Vec<u32>> = (1..=n).map(|e| vec![e]).collect();
        StructuredPartition::new(n, vec![deme]).expect("singletons are a valid partition")
    }

    /// All n sample elements as singleton blocks, one per deme.
    pub fn scattered_singletons(n: u32) -> Self {
        let demes: Vec<Vec<Vec<u32>>> = (1..=n).map(|e| vec![vec![e]]).collect();
        StructuredPartition::new(n, demes).expect("singletons are a valid partition")
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn demes(&self) -> &[Vec<Vec<u32>>] {
        &self.demes
    }

    pub fn deme_count(&self) -> usize {
        self.demes.len()
    }

    pub fn block_count(&self) -> usize {
        self.demes.iter().map(|d| d.len()).sum()
    }

    /// Blocks in canonical order (deme by deme).
    pub fn blocks(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.demes.iter().flatten()
    }

    /// Multiset of per-deme block counts.
    pub fn occupancy_profile(&self) -> OccupancyProfile {
        OccupancyProfile::new(self.demes.iter().map(|d| d.len() as u32).collect())
    }

    /// True when every deme holds exactly one block.
    pub fn is_scattered(&self) -> bool {
        self.demes.iter().all(|d| d.len() == 1)
    }

    /// Merge `blocks` (at least two, all within deme `deme`) into one block.
    pub fn merge_blocks(&self, deme: usize, blocks: &[usize]) -> Result<Self, PartitionError> {
        let d = self
            .demes
            .get(deme)
            .ok_or(PartitionError::BadDeme { deme, demes: self.demes.len() })?;
        let mut idx: Vec<usize> = blocks.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.len() < 2 {
            return Err(PartitionError::TooFewBlocks { got: idx.len() });
        }
        if let Some(&bad) = idx.iter().find(|&&b| b >= d.len()) {
            return Err(PartitionError::BadBlock { deme, block: bad, blocks: d.len() });
        }
        let mut new_demes = self.demes.clone();
        let mut merged: Vec<u32> = Vec::new();
        for &b in idx.iter().rev() {
            merged.extend(new_demes[deme].remove(b));
        }
        new_demes[deme].push(merged);
        StructuredPartition::new(self.n, new_demes)
    }

    /// Move one block to an existing deme or to a fresh (empty) one.
    pub fn move_block(
        &self,
        deme: usize,
        block: usize,
        dest: Destination,
    ) -> Result<Self, PartitionError> {
        let d = self
            .demes
            .get(deme)
            .ok_or(PartitionError::BadDeme { deme, demes: self.demes.len() })?;
        if block >= d.len() {
            return Err(PartitionError::BadBlock { deme, block, blocks: d.len() });
        }
        if let Destination::Existing(t) = dest {
            if t >= self.demes.len() {
                return Err(PartitionError::BadDeme { deme: t, demes: self.demes.len() });
            }
        }
        let mut new_demes = self.demes.clone();
        let moved = new_demes[deme].remove(block);
        match dest {
            Destination::Existing(t) => new_demes[t].push(moved),
            Destination::Fresh => new_demes.push(vec![moved]),
        }
        StructuredPartition::new(self.n, new_demes)
    }

    /// Forget the deme structure.
    pub fn unstructured(&self) -> UnstructuredPartition {
        let mut blocks: Vec<Vec<u32>> = self.blocks().cloned().collect();
        blocks.sort_unstable_by_key(|b| b[0]);
        UnstructuredPartition { n: self.n, blocks }
    }

    /// Restriction to the subsample {1..m}: drop every element above m, then
    /// empty blocks and demes.
    pub fn restrict(&self, m: u32) -> Result<Self, PartitionError> {
        if m == 0 || m > self.n {
            return Err(PartitionError::BadRestriction { m, n: self.n });
        }
        let demes: Vec<Vec<Vec<u32>>> = self
            .demes
            .iter()
            .map(|d| {
                d.iter()
                    .map(|b| b.iter().copied().filter(|&e| e <= m).collect::<Vec<u32>>())
                    .filter(|b| !b.is_empty())
                    .collect::<Vec<_>>()
            })
            .collect();
        StructuredPartition::new(m, demes)
    }
}

/// Merge blocks addressed by flat canonical index across demes (used on
/// scattered states where every deme holds one block).
fn merge_across(sp: &StructuredPartition, indices: &[usize]) -> Result<StructuredPartition, PartitionError> {
    let blocks: Vec<&Vec<u32>> = sp.blocks().collect();
    let mut idx: Vec<usize> = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if idx.len() < 2 {
        return Err(PartitionError::TooFewBlocks { got: idx.len() });
    }
    if let Some(&bad) = idx.iter().find(|&&b| b >= blocks.len()) {
        return Err(PartitionError::BadBlock { deme: 0, block: bad, blocks: blocks.len() });
    }
    let mut merged: Vec<u32> = Vec::new();
    let mut demes: Vec<Vec<Vec<u32>>> = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        if idx.contains(&i) {
            merged.extend(b.iter().copied());
        } else {
            demes.push(vec![(*b).clone()]);
        }
    }
    demes.push(vec![merged]);
    StructuredPartition::new(sp.n(), demes)
}

impl fmt::Display for StructuredPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let demes: Vec<String> = self
            .demes
            .iter()
            .map(|d| {
                d.iter()
                    .map(|b| b.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .collect();
        write!(f, "{}", demes.join("|"))
    }
}

impl FromStr for StructuredPartition {
    type Err = PartitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Err(PartitionError::Parse { reason: "empty input".into() });
        }
        let mut demes: Vec<Vec<Vec<u32>>> = Vec::new();
        for deme_text in s.split('|') {
            let mut deme = Vec::new();
            for block_text in deme_text.split(';') {
                deme.push(parse_block(block_text)?);
            }
            demes.push(deme);
        }
        let n = max_element(&demes.iter().flatten().cloned().collect::<Vec<_>>());
        StructuredPartition::new(n, demes)
    }
}

fn parse_block(text: &str) -> Result<Vec<u32>, PartitionError> {
    text.split(',')
        .map(|tok| {
            tok.trim().parse::<u32>().map_err(|_| PartitionError::Parse {
                reason: format!("bad element {tok:?}"),
            })
        })
        .collect()
}

fn parse_blocks(s: &str) -> Result<Vec<Vec<u32>>, PartitionError> {
    if s.trim().is_empty() {
        return Err(PartitionError::Parse { reason: "empty input".into() });
    }
    s.split(';').map(parse_block).collect()
}

fn max_element(blocks: &[Vec<u32>]) -> u32 {
    blocks.iter().flatten().copied().max().unwrap_or(0)
}

/// Every structured partition of {1..n}: each set partition of the sample,
/// blocks grouped into demes in every possible way. Guarded at n <= 8 (the
/// count grows like a double Bell number).
pub fn enumerate_structured(n: u32) -> Result<Vec<StructuredPartition>, PartitionError> {
    const MAX: u32 = 8;
    if n == 0 {
        return Err(PartitionError::EmptySample);
    }
    if n > MAX {
        return Err(PartitionError::TooLargeToEnumerate { n, max: MAX });
    }
    let mut out = Vec::new();
    for blocks in set_partitions(n as usize) {
        let blocks: Vec<Vec<u32>> = blocks
            .iter()
            .map(|b| b.iter().map(|&e| e as u32 + 1).collect())
            .collect();
        for grouping in set_partitions(blocks.len()) {
            let demes: Vec<Vec<Vec<u32>>> = grouping
                .iter()
                .map(|g| g.iter().map(|&i| blocks[i].clone()).collect())
                .collect();
            out.push(StructuredPartition::new(n, demes)?);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Every scattered state: one block per deme, so exactly the set partitions
/// of {1..n}; there are Bell(n) of them.
pub fn enumerate_scattered(n: u32) -> Result<Vec<StructuredPartition>, PartitionError> {
    const MAX: u32 = 8;
    if n == 0 {
        return Err(PartitionError::EmptySample);
    }
    if n > MAX {
        return Err(PartitionError::TooLargeToEnumerate { n, max: MAX });
    }
    let mut out = Vec::new();
    for blocks in set_partitions(n as usize) {
        let demes: Vec<Vec<Vec<u32>>> = blocks
            .iter()
            .map(|b| vec![b.iter().map(|&e| e as u32 + 1).collect()])
            .collect();
        out.push(StructuredPartition::new(n, demes)?);
    }
    out.sort_unstable();
    Ok(out)
}

/// Bell number B(n) as f64 (exact for the enumeration range).
pub fn bell_number(n: u32) -> u128 {
    bell_numbers(n as usize)[n as usize]
}
