//! Scenario files: the JSON description of one simulation, its validation
//! against the published schema, execution and policy comparison.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ChannelModel, Plane};
use crate::model::{ComputeCapability, ComputeWorkload, MeasurementNode, NodeId, Position, SensingRequest};
use crate::offload::{Policy, RoutingNode};

pub mod compare;
pub mod runner;
pub mod validate;

pub use compare::{compare, render_table, ComparisonRow};
pub use runner::{run, RunError, RunOutput};
pub use validate::{validate, validate_value, Violation};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scenario has {} violation(s):\n{}", .0.len(), Violations(.0))]
    Invalid(Vec<Violation>),
}

struct Violations<'a>(&'a [Violation]);

impl fmt::Display for Violations<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in self.0 {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub fixed_latency: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub control: ChannelSpec,
    pub data: ChannelSpec,
}

impl Channels {
    pub fn control(&self) -> ChannelModel {
        ChannelModel::new(Plane::Control, self.control.fixed_latency, self.control.bandwidth)
    }

    pub fn data(&self) -> ChannelModel {
        ChannelModel::new(Plane::Data, self.data.fixed_latency, self.data.bandwidth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandStep {
    pub at: f64,
    pub comm_demand: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    #[serde(default)]
    pub comm_demand: f64,
    #[serde(default)]
    pub sensing_demand: f64,
    #[serde(default = "one")]
    pub w_comm: f64,
    #[serde(default = "one")]
    pub w_sens: f64,
    /// Below this sensing share the refresh rate halves.
    #[serde(default)]
    pub min_sensing_share: f64,
    /// Later communication demand levels, applied from `at` onwards.
    #[serde(default)]
    pub demand_schedule: Vec<DemandStep>,
}

impl CellSpec {
    pub fn comm_demand_at(&self, t: f64) -> f64 {
        self.demand_schedule
            .iter()
            .filter(|s| s.at <= t)
            .max_by(|a, b| a.at.total_cmp(&b.at))
            .map_or(self.comm_demand, |s| s.comm_demand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNodeSpec {
    #[serde(flatten)]
    pub node: MeasurementNode,
    #[serde(default)]
    pub cell: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumer {
    pub id: NodeId,
    pub authorized: bool,
}

/// Ground-truth object to be sensed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: String,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingRequestSpec {
    #[serde(flatten)]
    pub request: SensingRequest,
    pub start: f64,
    /// Ground-truth target inside the area.
    pub target: String,
    #[serde(default)]
    pub cell: Option<String>,
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub workload: ComputeWorkload,
    pub offloader: NodeId,
    pub arrival: f64,
    #[serde(default)]
    pub route_via: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    NodeFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at: f64,
    pub node: NodeId,
    pub kind: FaultKind,
}

fn default_tick() -> f64 {
    0.1
}

fn default_k() -> usize {
    2
}

fn default_policy() -> Policy {
    Policy::MinLatency
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_tick")]
    pub allocation_tick: f64,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_k")]
    pub multi_node_k: usize,
    pub channels: Channels,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub measurement_nodes: Vec<MeasurementNodeSpec>,
    #[serde(default)]
    pub compute_nodes: Vec<ComputeCapability>,
    #[serde(default)]
    pub routing_nodes: Vec<RoutingNode>,
    #[serde(default)]
    pub consumers: Vec<Consumer>,
    #[serde(default)]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub sensing_requests: Vec<SensingRequestSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

impl Scenario {
    /// Parses and fully validates scenario text.
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let violations = validate_value(&value);
        if !violations.is_empty() {
            return Err(ScenarioError::Invalid(violations));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Scenario::from_json(&text)
    }

    pub fn measurement_nodes(&self) -> Vec<MeasurementNode> {
        self.measurement_nodes.iter().map(|m| m.node.clone()).collect()
    }
}
