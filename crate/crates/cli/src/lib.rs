//! Scenario loading, simulation, calibration, reporting and verification
//! behind the `tollgate` command.

pub mod bundled;
pub mod calibrate;
pub mod error;
pub mod report;
pub mod run;
pub mod scenario;
pub mod verify;

pub use error::CliError;
