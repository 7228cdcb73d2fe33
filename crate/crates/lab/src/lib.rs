//! Command-line harness and live control service for timewarp experiments.

pub mod cli;
pub mod control;
pub mod protocol;
