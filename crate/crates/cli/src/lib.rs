//! Front end for `permbarrier`: JSON problem specifications in;
//! certificates, verification reports and plot-ready grids out.

pub mod error;
pub mod export;
pub mod run;
pub mod spec;

pub use error::CliError;
pub use run::{Outcome, TOLERANCE_ENV};
pub use spec::{Mode, Overrides, Problem, ProblemSpec};
