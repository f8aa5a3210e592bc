//! Differentially private group-by aggregation with autotuned contribution
//! bounds.
//!
//! The pipeline answers queries of the form `SELECT ... SUM(value) ... GROUP
//! BY keys` under (epsilon, delta)-differential privacy. Each contributing
//! unit's influence on the output is capped by contribution bounds (number of
//! groups touched, per-group magnitude, and L1/L2 norms across groups). When
//! the query omits a bound, a small Bernoulli sample of units is spent on a
//! private quantile estimate that fills it in; the remaining units are
//! aggregated exactly, noised, and (for open key domains) thresholded so that
//! the presence of rare groups stays private.
//!
//! Module map:
//! - [`query`]: SQL-dialect parsing, canonical rendering, bound gap analysis.
//! - [`dataset`]: upload ingestion, per-unit scalar derivation, sampling.
//! - [`bounding`]: enforcement of contribution bounds on raw uploads.
//! - [`mechanisms`]: noise samplers, sensitivity, exact partial aggregation,
//!   and the noised/thresholded histogram release.
//! - [`quantile`]: the private quantile walk over a fixed multiplicative grid.
//! - [`autotune`]: sample-size calculus and end-to-end bound tuning.
//! - [`ledger`]: access policy checks and the per-unit privacy budget ledger.
//! - [`rng`]: deterministic derivation of all randomness from one seed.

pub mod autotune;
pub mod bounding;
pub mod dataset;
pub mod ledger;
pub mod mechanisms;
pub mod quantile;
pub mod query;
pub mod rng;
