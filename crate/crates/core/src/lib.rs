//! Detection of spatially contiguous clusters of elevated or reduced disease
//! risk in areal count data.
//!
//! The pipeline has two stages. Prior-period log-SIRs are clustered by a
//! contiguity-constrained agglomerative algorithm, giving one candidate
//! partition for every cluster count. Each candidate is then fitted to the
//! study-period counts as a Poisson model with intrinsic CAR random effects
//! and a per-cluster intercept, and the candidate minimising DIC is selected.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod car;
pub mod cluster;
pub mod config;
pub mod diagnostics;
pub mod eval;
pub mod gmrf;
pub mod graph;
pub mod pipeline;
pub mod risk;
pub mod select;
pub mod sim;

pub use car::{fit, McmcSettings, ModelFit, ModelSpec, Priors};
pub use cluster::{agglomerate, ClusterConfig, LinkageMethod, MergeTree};
pub use config::RunConfig;
pub use graph::AreaGraph;
pub use risk::{CountPanel, PriorRiskMatrix};
pub use select::{sweep, DicResult, SweepResult, SweepSettings};
