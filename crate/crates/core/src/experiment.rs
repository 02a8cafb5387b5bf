//! Reproducible Monte Carlo experiment drivers.
//!
//! An [`ExperimentConfig`] fixes a model, a process, a sample, a time grid
//! and a root seed; [`run_experiment`] simulates the requested number of
//! replicate genealogies in parallel and emits per-grid-time histograms of
//! the sampled partition. Replicate seeds are derived from the root seed by
//! a fixed 64-bit mix, and histograms are merged commutatively, so the
//! output is byte-identical for a given config regardless of how many
//! worker threads run the replicates.
//!
//! The module also carries the statistical drivers built on those paths:
//! [`merger_rate_mle`] (exponential-rate estimates of merger events),
//! [`k_sweep`] (merger statistics across source-deme counts), and
//! [`converge_d`] (total-variation distance of the finite-deme model from
//! the limit law along a ladder of deme counts).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finite_d::{simulate_finite_d, FiniteDConfig};
use crate::measures::XiMeasure;
use crate::partitions::{PartitionError, StructuredPartition};
use crate::rates::{ModelParams, RateError};
use crate::sim::{
    simulate_fast_process, simulate_lambda_coalescent, simulate_limit_process,
    simulate_xi_coalescent, PathEvent, PathSample, SimError, StopRule,
};
use crate::stats::{
    bootstrap_se_vs_exact, tv_vs_exact, EmpiricalDistribution, RateEstimate, StatsError,
};
use crate::transient::{transient_distribution_exact, ProcessKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("failed to write results: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode results: {0}")]
    Json(#[from] serde_json::Error),
}

/// Derive the seed of replicate `index` from the root seed.
///
/// The mix is one splitmix64 step applied to
/// `root ^ (index + 1) * 0x9E3779B97F4A7C15`: add-xor-shift-multiply with
/// the usual constants. It is fixed so that result files depend only on
/// (config, root seed), never on thread scheduling.
pub fn replicate_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-replicate generator; see [`replicate_seed`].
pub fn replicate_rng(root: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(replicate_seed(root, index))
}

/// Which stochastic process a run simulates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProcessSelector {
    /// Within-deme dynamics of the model (mergers, moves to empty demes).
    Fast,
    /// Limiting slow process (collisions resolved by instantaneous bursts).
    Slow,
    /// Finite-deme model with the given geometry.
    FiniteD {
        #[serde(flatten)]
        config: FiniteDConfig,
    },
    /// Exchangeable single-merger coalescent driven by the model's
    /// within-deme measure, started from scattered singletons.
    LambdaReference,
    /// Exchangeable simultaneous-merger coalescent with an explicit
    /// simplex measure, started from scattered singletons.
    XiReference { measure: XiMeasure },
}

fn default_initial() -> String {
    "scattered".to_string()
}

/// A complete, serialisable description of one Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub process: ProcessSelector,
    /// Number of sampled lineages.
    pub sample_size: u32,
    /// Starting partition: `scattered` (one singleton per deme) or a
    /// partition in text form, e.g. `1,2;3|4`.
    #[serde(default = "default_initial")]
    pub initial: String,
    pub replicates: u64,
    /// Times at which the marginal law is recorded; strictly increasing.
    pub time_grid: Vec<f64>,
    pub root_seed: u64,
    /// Directory for result files; when absent results stay in memory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate()?;
        if self.sample_size < 1 {
            return Err(ExperimentError::BadConfig {
                reason: "sample_size must be at least 1".into(),
            });
        }
        if self.replicates < 1 {
            return Err(ExperimentError::BadConfig {
                reason: "replicates must be at least 1".into(),
            });
        }
        if self.time_grid.is_empty() {
            return Err(ExperimentError::BadConfig { reason: "time_grid must be non-empty".into() });
        }
        for w in self.time_grid.windows(2) {
            if !(w[1] > w[0]) {
                return Err(ExperimentError::BadConfig {
                    reason: format!("time_grid must be strictly increasing, got {} then {}", w[0], w[1]),
                });
            }
        }
        if !self.time_grid.iter().all(|t| t.is_finite() && *t >= 0.0) {
            return Err(ExperimentError::BadConfig {
                reason: "time_grid entries must be finite and non-negative".into(),
            });
        }
        self.initial_state()?;
        Ok(())
    }

    /// Resolve the starting partition against the sample size.
    pub fn initial_state(&self) -> Result<StructuredPartition, ExperimentError> {
        let state = if self.initial == "scattered" {
            StructuredPartition::scattered_singletons(self.sample_size)
        } else {
            let parsed: StructuredPartition = self.initial.parse()?;
            if parsed.n() != self.sample_size {
                return Err(ExperimentError::BadConfig {
                    reason: format!(
                        "initial partition covers {} elements but sample_size is {}",
                        parsed.n(),
                        self.sample_size
                    ),
                });
            }
            parsed
        };
        if matches!(
            self.process,
            ProcessSelector::LambdaReference | ProcessSelector::XiReference { .. }
        ) && !(self.initial == "scattered")
        {
            return Err(ExperimentError::BadConfig {
                reason: "reference coalescents start from scattered singletons only".into(),
            });
        }
        Ok(state)
    }
}

/// In-memory result of a run: one partition tally per grid time, plus the
/// rendered CSV table and metadata sidecar.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub histograms: Vec<(f64, EmpiricalDistribution<StructuredPartition>)>,
    /// CSV with header `time,partition,count,freq,se`, sorted by grid time
    /// then canonical partition order. Byte-identical across reruns.
    pub csv: String,
    pub metadata: String,
}

fn simulate_one(
    config: &ExperimentConfig,
    initial: &StructuredPartition,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PathSample, ExperimentError> {
    let path = match &config.process {
        ProcessSelector::Fast => simulate_fast_process(initial, &config.model, horizon, rng)?,
        ProcessSelector::Slow => {
            simulate_limit_process(initial, &config.model, StopRule::Horizon(horizon), rng)?
        }
        ProcessSelector::FiniteD { config: geometry } => {
            simulate_finite_d(initial, &config.model, geometry, horizon, rng)?
        }
        ProcessSelector::LambdaReference => simulate_lambda_coalescent(
            &config.model.within_deme_measure,
            config.sample_size,
            rng,
        )?,
        ProcessSelector::XiReference { measure } => {
            simulate_xi_coalescent(measure, config.sample_size, rng)?
        }
    };
    Ok(path)
}

/// Run the configured number of replicates and tabulate the marginal law of
/// the partition at every grid time.
///
/// Replicates run in parallel; each one draws its own generator from
/// [`replicate_rng`] and tallies are merged by summing counts, so the
/// result does not depend on the degree of parallelism. When the config
/// names an output directory, `histograms.csv` and `metadata.txt` are
/// written there.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    config.validate()?;
    let initial = config.initial_state()?;
    let horizon = *config.time_grid.last().expect("validated non-empty grid");
    let started = std::time::Instant::now();

    let tallies = (0..config.replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(config.root_seed, i);
            let path = simulate_one(config, &initial, horizon, &mut rng)?;
            let states: Vec<StructuredPartition> = config
                .time_grid
                .iter()
                .map(|&t| path.state_at(t).clone())
                .collect();
            Ok(states)
        })
        .try_fold(
            || vec![EmpiricalDistribution::<StructuredPartition>::new(); config.time_grid.len()],
            |mut acc, states: Result<Vec<StructuredPartition>, ExperimentError>| {
                for (slot, state) in acc.iter_mut().zip(states?) {
                    slot.record(state);
                }
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![EmpiricalDistribution::<StructuredPartition>::new(); config.time_grid.len()],
            |mut a, b| {
                for (slot, other) in a.iter_mut().zip(&b) {
                    slot.merge(other);
                }
                Ok(a)
            },
        )?;

    let histograms: Vec<(f64, EmpiricalDistribution<StructuredPartition>)> =
        config.time_grid.iter().copied().zip(tallies).collect();

    let csv = render_histograms_csv(&histograms)?;
    let metadata = render_metadata(config, started.elapsed());

    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("histograms.csv"), &csv)?;
        std::fs::write(dir.join("metadata.txt"), &metadata)?;
    }

    Ok(ExperimentResult { histograms, csv, metadata })
}

fn render_histograms_csv(
    histograms: &[(f64, EmpiricalDistribution<StructuredPartition>)],
) -> Result<String, ExperimentError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["time", "partition", "count", "freq", "se"])
        .map_err(std::io::Error::other)?;
    for (t, tally) in histograms {
        for (state, count) in tally.iter() {
            writer
                .write_record([
                    t.to_string(),
                    state.to_string(),
                    count.to_string(),
                    tally.freq(state).to_string(),
                    tally.freq_std_error(state).to_string(),
                ])
                .map_err(std::io::Error::other)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn render_metadata(config: &ExperimentConfig, elapsed: std::time::Duration) -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string());
    let mut out = String::new();
    let _ = writeln!(out, "root_seed = {}", config.root_seed);
    let _ = writeln!(out, "replicates = {}", config.replicates);
    let _ = writeln!(out, "git = {git}");
    let _ = writeln!(out, "wall_time_ms = {}", elapsed.as_millis());
    let _ = writeln!(
        out,
        "config = {}",
        serde_json::to_string(config).unwrap_or_else(|_| "unserialisable".to_string())
    );
    out
}

/// What a comparison measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    TotalVariation,
    RateMle,
    MeanWithCi,
}

/// Where a reference value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// An explicit formula evaluated directly.
    ClosedForm,
    /// An independent exact solver (absorption or transient).
    Oracle,
    /// Exact by construction (determinism, counting).
    Exact,
}

/// One estimate-versus-reference comparison with its verdict.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub statistic: StatisticKind,
    /// Human-readable label of the quantity compared.
    pub name: String,
    pub estimate: f64,
    /// Monte Carlo standard error of the estimate (0 for exact checks).
    pub std_error: f64,
    pub reference: f64,
    pub reference_source: ReferenceSource,
    /// Allowed deterministic discrepancy on top of the 3-sigma band.
    pub tolerance: f64,
    pub pass: bool,
}

impl ComparisonReport {
    /// Verdict rule: pass iff `|estimate - reference| <= tolerance + 3 * SE`.
    pub fn new(
        statistic: StatisticKind,
        name: impl Into<String>,
        estimate: f64,
        std_error: f64,
        reference: f64,
        reference_source: ReferenceSource,
        tolerance: f64,
    ) -> Self {
        let pass = (estimate - reference).abs() <= tolerance + 3.0 * std_error;
        ComparisonReport {
            statistic,
            name: name.into(),
            estimate,
            std_error,
            reference,
            reference_source,
            tolerance,
            pass,
        }
    }

    /// One-line rendering for terminal output.
    pub fn line(&self) -> String {
        format!(
            "{} {}: estimate {:.6e}, reference {:.6e} ({}), |diff| {:.3e} <= {:.3e} + 3 * {:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.estimate,
            self.reference,
            match self.reference_source {
                ReferenceSource::ClosedForm => "closed-form",
                ReferenceSource::Oracle => "oracle",
                ReferenceSource::Exact => "exact",
            },
            (self.estimate - self.reference).abs(),
            self.tolerance,
            self.std_error,
        )
    }
}

/// Collapse a path to its settled transitions: for runs of records sharing
/// one timestamp (a collision and its instantaneous resolution) only the
/// last record counts.
fn settled_events(path: &PathSample) -> Vec<&PathEvent> {
    let mut out: Vec<&PathEvent> = Vec::new();
    for event in &path.events {
        if let Some(last) = out.last() {
            if last.time == event.time {
                out.pop();
            }
        }
        out.push(event);
    }
    out
}

/// Exponential-rate estimates for classified merger events.
///
/// Walks each path's settled transitions. Between transitions the chain
/// holds some state `s` for a span `dt`; every `(key, weight)` returned by
/// `exposures(s)` accrues `weight * dt` of exposure. Each transition is
/// passed to `classify(previous state, event)`; a returned key counts one
/// event. The estimate per key is events / exposure with a Wald standard
/// error; keys with zero exposure are flagged undefined.
pub fn merger_rate_mle<K, C, E>(
    paths: &[PathSample],
    classify: C,
    exposures: E,
) -> BTreeMap<K, RateEstimate>
where
    K: Ord + Clone,
    C: Fn(&StructuredPartition, &PathEvent) -> Option<K>,
    E: Fn(&StructuredPartition) -> Vec<(K, f64)>,
{
    let mut exposure: BTreeMap<K, f64> = BTreeMap::new();
    let mut events: BTreeMap<K, u64> = BTreeMap::new();
    for path in paths {
        let mut prev_state = &path.initial;
        let mut prev_time = 0.0;
        for event in settled_events(path) {
            let dt = event.time - prev_time;
            for (key, weight) in exposures(prev_state) {
                *exposure.entry(key).or_insert(0.0) += weight * dt;
            }
            if let Some(key) = classify(prev_state, event) {
                *events.entry(key).or_insert(0) += 1;
            }
            prev_state = &event.state;
            prev_time = event.time;
        }
        // Censored tail: exposure accrues to the end of the observation
        // window even though no further event was seen.
        let dt = path.end_time - prev_time;
        if dt > 0.0 {
            for (key, weight) in exposures(prev_state) {
                *exposure.entry(key).or_insert(0.0) += weight * dt;
            }
        }
    }
    let mut keys: Vec<K> = exposure.keys().cloned().collect();
    keys.extend(events.keys().cloned());
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let est = RateEstimate::new(
                events.get(&key).copied().unwrap_or(0),
                exposure.get(&key).copied().unwrap_or(0.0),
            );
            (key, est)
        })
        .collect()
}

/// One row of a source-count sweep.
#[derive(Debug, Clone, Serialize)]
pub struct KSweepRow {
    pub num_sources: u32,
    pub replicates: u64,
    /// Merger events that coalesced exactly one pair.
    pub pairwise_events: u64,
    /// Merger events that removed two or more blocks at once.
    pub multi_events: u64,
    /// Rate estimate per specific pair (exposure weighted by C(b, 2)).
    pub pairwise_rate: RateEstimate,
    /// Fraction of merger events that were multiple mergers, with a
    /// binomial standard error.
    pub multi_freq: f64,
    pub multi_freq_se: f64,
}

/// Sweep the number of source demes, estimating the per-pair merger rate
/// and the frequency of multiple-merger events from limit-process
/// genealogies run to their common ancestor.
///
/// For each entry `(K, replicates)` the model runs with `num_sources = K`
/// from scattered singletons of size `n`. Replicate seeds derive from
/// `(root_seed mixed with K, replicate index)`.
pub fn k_sweep(
    model: &ModelParams,
    entries: &[(u32, u64)],
    n: u32,
    root_seed: u64,
) -> Result<Vec<KSweepRow>, ExperimentError> {
    let mut rows = Vec::with_capacity(entries.len());
    for &(k, replicates) in entries {
        let mut params = model.clone();
        params.num_sources = k;
        params.validate()?;
        let initial = StructuredPartition::scattered_singletons(n);
        let sub_root = replicate_seed(root_seed, k as u64);

        let paths = (0..replicates)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(sub_root, i);
                simulate_limit_process(&initial, &params, StopRule::UntilMrca, &mut rng)
                    .map_err(ExperimentError::from)
            })
            .collect::<Result<Vec<PathSample>, ExperimentError>>()?;

        let rates = merger_rate_mle(
            &paths,
            |prev, event| {
                let drop = prev.block_count() - event.state.block_count();
                if drop == 1 {
                    Some(1u8)
                } else if drop >= 2 {
                    Some(2u8)
                } else {
                    None
                }
            },
            |state| {
                let b = state.block_count() as u64;
                if b >= 2 {
                    // Per-pair exposure: C(b, 2) pairs share the state's span.
                    vec![(1u8, (b * (b - 1) / 2) as f64)]
                } else {
                    vec![]
                }
            },
        );
        let pairwise_rate = rates.get(&1u8).copied().unwrap_or(RateEstimate::new(0, 0.0));
        let pairwise_events = pairwise_rate.events;
        let mut multi_events = 0u64;
        for path in &paths {
            let mut prev_blocks = path.initial.block_count();
            for event in settled_events(path) {
                let blocks = event.state.block_count();
                if prev_blocks - blocks >= 2 {
                    multi_events += 1;
                }
                prev_blocks = blocks;
            }
        }
        let total_events = pairwise_events + multi_events;
        let (multi_freq, multi_freq_se) = if total_events > 0 {
            let f = multi_events as f64 / total_events as f64;
            (f, (f * (1.0 - f) / total_events as f64).sqrt())
        } else {
            (0.0, 0.0)
        };
        rows.push(KSweepRow {
            num_sources: k,
            replicates,
            pairwise_events,
            multi_events,
            pairwise_rate,
            multi_freq,
            multi_freq_se,
        });
    }
    Ok(rows)
}

/// Number of blocks removed by a settled event (0 for ghost records).
fn p_block_drop(path: &PathSample, event: &PathEvent) -> usize {
    // Settled predecessor: the last settled record before this event, or
    // the initial state. Recomputed locally to keep the helper standalone.
    let mut prev = &path.initial;
    for e in settled_events(path) {
        if std::ptr::eq(e, event) {
            return prev.block_count() - e.state.block_count();
        }
        prev = &e.state;
    }
    0
}

/// One row of a deme-count convergence ladder.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergeDRow {
    pub num_demes: u32,
    pub replicates: u64,
    /// Total-variation distance of the finite-deme marginal at the probe
    /// time from the exact limit law.
    pub tv: f64,
    /// Bootstrap standard error of the distance.
    pub std_error: f64,
}

/// Distance of the finite-deme model from the limit law at one probe time,
/// along a ladder of deme counts.
///
/// The reference is the exact transient law of the limit process at `t`;
/// each ladder rung simulates `replicates` rescaled finite-deme paths from
/// scattered singletons and tabulates the state at `t`.
pub fn converge_d(
    model: &ModelParams,
    n: u32,
    d_values: &[(u32, u64)],
    t: f64,
    root_seed: u64,
) -> Result<Vec<ConvergeDRow>, ExperimentError> {
    let initial = StructuredPartition::scattered_singletons(n);
    let reference = transient_distribution_exact(&ProcessKind::Slow(model), &initial, t)?;
    let mut rows = Vec::with_capacity(d_values.len());
    for &(d, replicates) in d_values {
        let geometry = FiniteDConfig { num_demes: d, time_rescale: true };
        let sub_root = replicate_seed(root_seed, d as u64);
        let tally = (0..replicates)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(sub_root, i);
                let path = simulate_finite_d(&initial, model, &geometry, t, &mut rng)?;
                Ok(path.final_state().clone())
            })
            .try_fold(
                EmpiricalDistribution::<StructuredPartition>::new,
                |mut acc, state: Result<StructuredPartition, ExperimentError>| {
                    acc.record(state?);
                    Ok(acc)
                },
            )
            .try_reduce(EmpiricalDistribution::new, |mut a, b| {
                a.merge(&b);
                Ok(a)
            })?;
        let tv = tv_vs_exact(&tally, &reference.distribution)?;
        let mut boot_rng = replicate_rng(sub_root, u64::MAX);
        let std_error = bootstrap_se_vs_exact(&tally, &reference.distribution, &mut boot_rng)?;
        rows.push(ConvergeDRow { num_demes: d, replicates, tv, std_error });
    }
    Ok(rows)
}
