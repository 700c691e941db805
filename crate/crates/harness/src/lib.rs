//! Sweeps over (block, timestep, head) cells of a frozen diffusion backbone,
//! an append-only results store, and the reports built from it.

pub mod compare;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod report;
pub mod store;
pub mod sweep;

pub use config::{config_hash, Cell, RunConfig};
pub use error::{HarnessError, Result};
pub use evaluate::{evaluate_cell, Context};
pub use report::{emit_report, ReportStyle};
pub use store::{RunRecord, RunStore};
pub use sweep::{run_sweep, SweepSummary};
