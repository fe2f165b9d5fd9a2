//! Experiment harness.

pub mod battery;
pub mod config;
pub mod experiments;
pub mod inputs;
pub mod report;
