//! Scenario files, data loading, run orchestration and artifact output for
//! the `dmao` command.

pub mod compare;
pub mod error;
pub mod io;
pub mod runner;
pub mod scenario;
pub mod verify;

pub use error::{CliError, CliResult};
pub use runner::{run_instance, ScenarioSummary, VariantSummary, OUTPUT_ROOT_ENV};
pub use scenario::{load_instance, Instance, Scenario};
