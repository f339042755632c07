//! Experiment configuration and drivers.

pub mod config;
pub mod experiments;
pub mod selftest;
