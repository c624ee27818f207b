//! Flow-based market coupling simulation engine.
//!
//! The crate models a zonal electricity market on a DC-approximated
//! transmission network and walks it through the operational sequence:
//!
//! 1. [`grid`]: network model, dataset ingestion, PTDF/LODF sensitivities
//!    and selection of critical network elements (CNECs).
//! 2. [`fbmc_params`]: generation shift keys, zonal PTDFs, reference flows
//!    and remaining available margins defining the flow-based domain.
//! 3. [`dispatch`]: day-ahead market clearing under a configurable network
//!    representation (flow-based, NTC, nodal, unconstrained) and
//!    redispatch-based congestion management against the full network.
//! 4. [`chance`]: chance-constrained day-ahead clearing that sizes
//!    per-CNEC reliability margins endogenously from the covariance of
//!    intermittent-infeed deviations.
//! 5. [`montecarlo`]: Monte-Carlo evaluation of any day-ahead schedule
//!    against sampled real-time deviations, with congestion management per
//!    sample.
//! 6. [`pipeline`]: scenario configuration, the end-to-end run sequence,
//!    comparison across market designs and deterministic result export.

pub mod chance;
pub mod dispatch;
pub mod error;
pub mod fbmc_params;
pub mod montecarlo;
pub mod pipeline;
pub mod grid;
pub mod solver;

pub use error::{Error, Result};
