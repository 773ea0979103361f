//! Deterministic federated-learning simulator with device grouping.
//!
//! Devices are grouped once, before training, by clustering their averaged
//! feature vectors (optionally after p-stable LSH encoding). Each round then
//! samples one device per group, trains locally with SGD and aggregates the
//! weight deltas weighted by device data size. Random FedAvg selection and a
//! periodically re-clustered K-Center baseline are provided for comparison.

pub mod clustering;
pub mod data;
pub mod error;
pub mod features;
pub mod lsh;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
