//! Command-line harness: run configuration, training, evaluation, reports
//! and the gradient and NFE benchmarks.

pub mod bench;
pub mod cli;
pub mod config;
pub mod report;
pub mod run;
