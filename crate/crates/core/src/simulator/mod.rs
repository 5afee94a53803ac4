//! Data generators and Monte-Carlo helpers.

pub mod direct;
pub mod experiments;
pub mod rng;
pub mod roi;
pub mod stats;
pub mod timeseries;
