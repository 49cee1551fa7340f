//! Compute offloading: capability discovery, node selection, and the staged
//! offload procedure (discovery of capabilities, the offload request, then
//! task transfer, execution and result return) with failure reassignment.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineError;
use crate::model::NodeId;

pub mod controller;
pub mod estimate;
pub mod registry;
pub mod select;

pub use controller::{Controller, ControllerConfig, OffloadSession, RoutingNode};
pub use estimate::{compute_time, effective_rate, estimate_energy, estimate_latency};
pub use registry::{CapabilityRegistry, RegistryEntry};
pub use select::{feasible_cost, select_compute_nodes, Policy};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OffloadError {
    #[error("compute node {0} is fully loaded")]
    InfeasibleLoad(NodeId),
    #[error("no feasible compute node for workload {0}")]
    NoFeasibleNode(String),
    #[error("unknown offload session {0}")]
    UnknownSession(String),
    #[error("session {session}: illegal transition {from} -> {to}")]
    IllegalTransition { session: String, from: OffloadState, to: OffloadState },
    #[error("session {session} is in state {state}, expected {expected}")]
    WrongState { session: String, state: OffloadState, expected: OffloadState },
    #[error("compute node {0} has not advertised")]
    NotAdvertised(NodeId),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OffloadState {
    DiscoveryPhase1,
    DiscoveryPhase2,
    Offloading,
    Computing,
    Returning,
    Done,
    Failed,
    Reassigned,
}

impl OffloadState {
    /// Legal moves. Beyond the main line and the failure path this admits
    /// rejection at admission (no feasible node), failure while payloads are
    /// still in flight, and the loop back for the next iteration of
    /// multi-iteration work.
    pub fn can_become(self, next: OffloadState) -> bool {
        use OffloadState::*;
        matches!(
            (self, next),
            (DiscoveryPhase1, DiscoveryPhase2)
                | (DiscoveryPhase2, Offloading)
                | (Offloading, Computing)
                | (Computing, Returning)
                | (Returning, Done)
                | (Returning, Offloading)
                | (Computing, Failed)
                | (Offloading, Failed)
                | (DiscoveryPhase2, Failed)
                | (Failed, Reassigned)
                | (Reassigned, Offloading)
        )
    }
}

impl fmt::Display for OffloadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}
