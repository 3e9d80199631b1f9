//! Middle-tier caching server for immutable, run-keyed calibration objects.

pub mod backend;
pub mod broker;
pub mod cache;
pub mod config;
pub mod loadgen;
pub mod model;
pub mod monitor;
pub mod schemagen;
pub mod server;
pub mod wire;
