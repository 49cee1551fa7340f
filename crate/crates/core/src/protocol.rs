//! Message kinds exchanged between simulated nodes, with their wire sizes.
//!
//! The field layouts are documented in `docs/protocol.md`; sizes here drive
//! channel pricing. Bulk transfers (task payloads and results) are sized by
//! the workload itself.

use crate::engine::MessageBody;
use crate::model::{ComputeCapability, NodeId, SensingMeasurement, SensingResult};

/// Well-known identifiers of the network functions.
pub mod nf {
    /// Sensing management function (request intake and sensing control).
    pub const SEMF: &str = "semf";
    /// Sensing processing function.
    pub const SPF: &str = "spf";
    /// Compute offload controlling node.
    pub const COC: &str = "coc";
    /// Per-cell joint scheduler in the gNB.
    pub const SCHEDULER: &str = "gnb-scheduler";

    pub const RESERVED: [&str; 4] = [SEMF, SPF, COC, SCHEDULER];
}

pub mod size {
    pub const SENSING_REQUEST: f64 = 512.0;
    pub const NODE_CONFIG: f64 = 256.0;
    /// Header of the SPF configuration; each node entry adds `SPF_CONFIG_PER_NODE`.
    pub const SPF_CONFIG_BASE: f64 = 128.0;
    pub const SPF_CONFIG_PER_NODE: f64 = 160.0;
    pub const MEASUREMENT_REPORT: f64 = 192.0;
    pub const SENSING_RESULT_BASE: f64 = 128.0;
    pub const SENSING_RESULT_PER_ESTIMATE: f64 = 192.0;
    pub const ADVERTISE: f64 = 384.0;
    pub const OFFLOAD_REQUEST: f64 = 256.0;
    pub const OFFLOAD_GRANT_BASE: f64 = 128.0;
    pub const OFFLOAD_GRANT_PER_NODE: f64 = 32.0;
}

/// Identifies one branch of one iteration of one offload attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BranchRef {
    pub attempt: u32,
    pub iteration: u32,
    pub branch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    // Sensing, control plane.
    SensingRequest { request_id: String },
    NodeConfig { request_id: String },
    SpfConfig { request_id: String },
    SensingResult { result: SensingResult },
    // Sensing, data plane.
    MeasurementReport { request_id: String, round: u32, measurement: SensingMeasurement },
    // Offload, control plane.
    Advertise { capability: ComputeCapability },
    OffloadRequest { session: String },
    OffloadGrant { session: String, attempt: u32, nodes: Vec<NodeId> },
    // Offload, data plane. `target` is the final hop when routed.
    TaskTransfer { session: String, at: BranchRef, target: NodeId },
    ResultTransfer { session: String, at: BranchRef, target: NodeId },
    // Local timers.
    StartSensing { request_id: String },
    MeasurementRound { request_id: String, round: u32 },
    WorkloadArrival { session: String },
    ComputeComplete { session: String, at: BranchRef },
    AllocationTick,
    NodeFault { node: NodeId },
}

impl Body {
    /// Offload session an offload message or timer belongs to.
    pub fn session(&self) -> Option<&str> {
        match self {
            Body::OffloadRequest { session }
            | Body::OffloadGrant { session, .. }
            | Body::TaskTransfer { session, .. }
            | Body::ResultTransfer { session, .. }
            | Body::WorkloadArrival { session }
            | Body::ComputeComplete { session, .. } => Some(session),
            _ => None,
        }
    }
}

impl MessageBody for Body {
    fn kind(&self) -> &'static str {
        match self {
            Body::SensingRequest { .. } => "SensingRequest",
            Body::NodeConfig { .. } => "NodeConfig",
            Body::SpfConfig { .. } => "SpfConfig",
            Body::SensingResult { .. } => "SensingResult",
            Body::MeasurementReport { .. } => "MeasurementReport",
            Body::Advertise { .. } => "Advertise",
            Body::OffloadRequest { .. } => "OffloadRequest",
            Body::OffloadGrant { .. } => "OffloadGrant",
            Body::TaskTransfer { .. } => "TaskTransfer",
            Body::ResultTransfer { .. } => "ResultTransfer",
            Body::StartSensing { .. } => "StartSensing",
            Body::MeasurementRound { .. } => "MeasurementRound",
            Body::WorkloadArrival { .. } => "WorkloadArrival",
            Body::ComputeComplete { .. } => "ComputeComplete",
            Body::AllocationTick => "AllocationTick",
            Body::NodeFault { .. } => "NodeFault",
        }
    }
}

/// Kinds that configure nodes or the SPF; must travel on the control plane.
pub const CONFIGURATION_KINDS: [&str; 2] = ["NodeConfig", "SpfConfig"];

/// Kinds that carry measurement data or compute payloads; must travel on
/// the data plane.
pub const TRANSFER_KINDS: [&str; 3] = ["MeasurementReport", "TaskTransfer", "ResultTransfer"];
