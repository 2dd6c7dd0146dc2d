//! Farm-household microsimulation engine.
//!
//! One positive-mathematical-programming model is calibrated per surveyed
//! household; the calibrated population is then projected to a baseline and
//! re-solved under alternative fertilizer-subsidy policies. Results are
//! aggregated with survey expansion weights into land-use, production,
//! fertilizer, income and cost-benefit indicators.
//!
//! The pipeline, in order:
//!
//! 1. [`ingest`]: load survey tables, clean outliers, build households and activities.
//! 2. [`typology`]: practice clustering and farm classification.
//! 3. [`calibration`]: per-household behavioral terms and resource duals.
//! 4. [`scenario`]: baseline projection and policy counterfactuals.
//! 5. [`report`]: weighted indicator tables and cost-benefit summaries.
//!
//! [`household`] holds the per-household optimization problem and [`qp`] the
//! dense active-set solver underneath it.

pub mod calibration;
pub mod error;
pub mod household;
pub mod ingest;
pub mod io;
pub mod qp;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod synth;
pub mod typology;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
