use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{ComputeCapability, ComputeWorkload, NodeId, QosClass};

use super::estimate::{estimate_energy, estimate_latency};
use super::registry::CapabilityRegistry;
use super::OffloadError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    MinLatency,
    MinEnergy,
}

impl Policy {
    pub const ALL: [Policy; 2] = [Policy::MinLatency, Policy::MinEnergy];

    pub fn name(self) -> &'static str {
        match self {
            Policy::MinLatency => "min_latency",
            Policy::MinEnergy => "min_energy",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "min_latency" => Ok(Policy::MinLatency),
            "min_energy" => Ok(Policy::MinEnergy),
            other => Err(format!("unknown policy `{other}` (expected min_latency or min_energy)")),
        }
    }
}

/// Cost of running `w` on `cap` under `policy`, or `None` if the node
/// cannot take the work at all.
pub fn feasible_cost(w: &ComputeWorkload, cap: &ComputeCapability, policy: Policy) -> Option<f64> {
    if cap.memory_bytes < w.memory || !cap.supported_precisions.contains(&w.precision) {
        return None;
    }
    let latency = estimate_latency(w, cap).ok()?;
    if let QosClass::LatencySensitive { deadline } = w.qos {
        if latency > deadline {
            return None;
        }
    }
    Some(match policy {
        Policy::MinLatency => latency,
        Policy::MinEnergy => estimate_energy(w, cap),
    })
}

/// Chooses the Computing Node(s) for `w` among advertised, non-excluded
/// nodes. Single-node classes get the policy minimizer; multi-node classes
/// the `k` cheapest nodes, each costed on its even share of the work. Ties
/// go to the lowest node id.
pub fn select_compute_nodes(
    w: &ComputeWorkload,
    registry: &CapabilityRegistry,
    policy: Policy,
    k: usize,
    exclude: &BTreeSet<NodeId>,
) -> Result<Vec<NodeId>, OffloadError> {
    let branches = if w.traffic_class.is_multi_node() { k.max(1) } else { 1 };
    let share = w.split(branches);
    let mut ranked: Vec<(f64, &NodeId)> = registry
        .iter()
        .filter(|(id, _)| !exclude.contains(*id))
        .filter_map(|(id, e)| feasible_cost(&share, &e.capability, policy).map(|c| (c, id)))
        .collect();
    if ranked.is_empty() {
        return Err(OffloadError::NoFeasibleNode(w.workload_id.clone()));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    Ok(ranked.into_iter().take(branches).map(|(_, id)| id.clone()).collect())
}
