//! Deterministic discrete-event simulator for network-based sensing and
//! compute offloading in a mobile network.

pub mod engine;
pub mod kpi;
pub mod model;
pub mod offload;
pub mod protocol;
pub mod scenario;
pub mod scheduler;
pub mod sensing;
