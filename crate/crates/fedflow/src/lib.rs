//! Federated learning orchestration: partition a dataset across simulated
//! clients, run training rounds over in-process or TCP links, aggregate
//! uploads, and record metrics.

pub mod aggregation;
pub mod cli;
pub mod comms;
pub mod config;
pub mod data;
pub mod learner;
pub mod params;
pub mod protocol;
pub mod runtime;
pub mod tracker;
