//! Configuration-driven front end: single runs, sweeps, reports, and the
//! checkpoint format.

pub mod checkpoint;
pub mod cli;
pub mod report;
pub mod run;
pub mod stats;
pub mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use run::{run_training, RunConfig, RunRecord};
pub use sweep::{aggregate, l1_study, sweep, Aggregate, LrRule, SweepSpec};
