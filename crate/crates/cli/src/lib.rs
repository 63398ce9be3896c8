//! Command line front end: simulate datasets, run the odometry, evaluate
//! trajectories, benchmark divisors and dump panos.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pgm;
pub mod run;

pub use config::{ConfigError, Overrides, RunConfig};
pub use error::CliError;
pub use metrics::RunMetrics;
pub use run::{execute, Input, RunResult};
