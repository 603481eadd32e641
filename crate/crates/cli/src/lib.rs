//! Command-line front end for `adtool-core`: a small formula language,
//! derivative tables and a benchmark harness.

pub mod parse;
pub mod report;
pub mod run;

pub use parse::{parse, ParseError, Program};
pub use report::{BenchRow, DerivativeRow, Format, Report};
pub use run::{bench, eval, tensor, BenchOptions, CliError};
