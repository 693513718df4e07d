//! Design engine for two-stage clustered SMART studies.
//!
//! Patients are clusters, teeth are sub-units. Tooth-level outcomes carry a
//! spatially correlated latent effect (CAR prior over the tooth adjacency
//! graph), a skew-t error, and informative missingness driven by the same
//! latent effect through a probit model. The crate computes per-path moments
//! of the cluster-averaged outcome by Monte Carlo, combines them into IPW
//! regime means, variances and covariances, derives sample sizes for the
//! three regime hypotheses, and validates those sizes by simulating whole
//! trials.

pub mod config;
pub mod design;
pub mod dists;
pub mod error;
pub mod missing;
pub mod moments;
pub mod power;
pub mod report;
pub mod rng;
pub mod roots;
pub mod simtrial;
pub mod spatial;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
