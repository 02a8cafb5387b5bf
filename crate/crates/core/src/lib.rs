//! Coalescent processes in subdivided populations subject to recurrent mass
//! extinctions.
//!
//! The population lives on a large number of demes (islands) of fixed size N.
//! Genealogies of a sample run on two time scales: a fast one, on which
//! lineages sharing a deme merge or scatter to empty demes, and a slow one, on
//! which rare events (migration into an occupied deme, or an extinction event
//! followed by recolonisation from K source demes) gather lineages from
//! distinct demes into common ones. In the many-demes limit the slow process
//! only ever visits "scattered" states (at most one lineage per deme) and each
//! gathering is resolved by an instantaneous burst of the fast dynamics.
//!
//! The crate provides:
//! - structured partitions (blocks grouped into exchangeable demes) and their
//!   canonical form ([`partitions`]),
//! - finite measures on `[0,1]` and on the infinite simplex, with exact mixed
//!   moments ([`measures`]),
//! - exact transition rates for the within-deme (fast) dynamics, for
//!   geographical collisions of the limit (slow) process, and for the
//!   classical Kingman / Lambda / Xi coalescents, together with sampling
//!   consistency checks ([`rates`], [`collisions`]),
//! - the scattered-sample allele-configuration distribution ([`sampling`]),
//! - stochastic simulators for the fast, slow-limit, finite-D, Lambda and Xi
//!   processes plus exact absorption and transient solvers ([`sim`],
//!   [`finite_d`], [`transient`]),
//! - statistical comparison utilities and reproducible experiment drivers
//!   ([`stats`], [`experiment`]).

pub mod collisions;
mod comb;
pub mod experiment;
pub mod finite_d;
pub mod measures;
pub mod partitions;
pub mod rates;
pub mod sampling;
pub mod sim;
pub mod stats;
pub mod transient;

// Re-exports restored once all modules are in place.
