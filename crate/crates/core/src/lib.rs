//! Cart-pole reinforcement learning with simulation rewind on failure.
//!
//! A baseline learner restarts every trial from the center of the track after
//! a failure. The timewarp variant instead restores an earlier snapshot of the
//! same trial and keeps everything the learner has picked up, so training
//! time is spent close to the states that lead to failure.

pub mod agent;
pub mod discretizer;
pub mod env;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod timewarp;

pub use error::{Error, Result};
