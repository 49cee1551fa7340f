//! Sensing control: request authorization, area-to-node mapping under
//! consent, and session configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{covers, MeasurementNode, NodeId, Position, SensingArea, SensingMode, SensingRequest};

/// Fewest independent ranges that fix a point in the plane.
pub const MIN_PAIRS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestrationError {
    #[error("only {found} qualifying {unit} cover the area, need {needed}")]
    InsufficientCoverage { found: usize, needed: usize, unit: &'static str },
    #[error("no measurement nodes supplied")]
    NoNodes,
    #[error("illegal session transition {from} -> {to}")]
    IllegalTransition { from: SessionState, to: SessionState },
    #[error("session must be authorized before configuration (state {0})")]
    NotAuthorized(SessionState),
    #[error("node {0} in a pair is not among the supplied nodes")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Granted,
    Denied,
}

pub fn authorize(request: &SensingRequest, registry: &BTreeSet<NodeId>) -> Decision {
    if registry.contains(&request.consumer_id) {
        Decision::Granted
    } else {
        Decision::Denied
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Requested,
    Authorized,
    Configured,
    Measuring,
    Completed,
    Rejected,
}

impl SessionState {
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Requested, Authorized)
                | (Authorized, Configured)
                | (Configured, Measuring)
                | (Measuring, Completed)
                | (Requested | Authorized | Configured | Measuring, Rejected)
        )
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// What the SPF needs to interpret measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub positions: BTreeMap<NodeId, Position>,
    pub mode: SensingMode,
    pub area: SensingArea,
}

impl GeometryConfig {
    pub fn position(&self, id: &NodeId) -> Option<Position> {
        self.positions.get(id).copied()
    }
}

pub type Pair = (NodeId, NodeId);

#[derive(Debug, Clone, PartialEq)]
pub struct SensingSession {
    pub request: SensingRequest,
    pub pairs: Vec<Pair>,
    pub spf_config: Option<GeometryConfig>,
    state: SessionState,
}

impl SensingSession {
    pub fn new(request: SensingRequest) -> Self {
        Self { request, pairs: Vec::new(), spf_config: None, state: SessionState::Requested }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn transition(&mut self, next: SessionState) -> Result<SessionState, OrchestrationError> {
        if !self.state.can_become(next) {
            return Err(OrchestrationError::IllegalTransition { from: self.state, to: next });
        }
        let prev = self.state;
        self.state = next;
        Ok(prev)
    }

    /// Applies the authorization decision; a denial rejects the session.
    pub fn apply_decision(&mut self, decision: Decision) -> Result<SessionState, OrchestrationError> {
        match decision {
            Decision::Granted => self.transition(SessionState::Authorized),
            Decision::Denied => self.transition(SessionState::Rejected),
        }
    }

    /// Results may only leave a session that was authorized and not rejected.
    pub fn may_emit_results(&self) -> bool {
        matches!(self.state, SessionState::Measuring | SessionState::Completed)
    }
}

fn eligible(node: &MeasurementNode, area: &SensingArea) -> bool {
    node.authorized && (!node.is_ue() || node.consent) && covers(node, area)
}

/// Nodes whose quality indicator meets the request's minimum.
pub fn meeting_quality<'a>(request: &SensingRequest, nodes: &'a [MeasurementNode]) -> Vec<&'a MeasurementNode> {
    nodes.iter().filter(|n| n.quality_indicator >= request.min_quality).collect()
}

/// Maps the area onto measurement pairs. Only authorized nodes whose
/// coverage contains the whole area qualify, and a UE additionally needs its
/// user's consent. Bistatic sessions use every ordered pair of distinct
/// qualifying nodes, monostatic sessions every qualifying node on its own.
pub fn select_pairs<'a, I>(area: &SensingArea, nodes: I, mode: SensingMode) -> Result<Vec<Pair>, OrchestrationError>
where
    I: IntoIterator<Item = &'a MeasurementNode>,
{
    let mut any = false;
    let mut ids: Vec<&NodeId> =
        nodes.into_iter().inspect(|_| any = true).filter(|n| eligible(n, area)).map(|n| &n.id).collect();
    if !any {
        return Err(OrchestrationError::NoNodes);
    }
    ids.sort();
    ids.dedup();
    let pairs: Vec<Pair> = match mode {
        SensingMode::Monostatic => ids.iter().map(|&id| (id.clone(), id.clone())).collect(),
        SensingMode::Bistatic => ids
            .iter()
            .flat_map(|&tx| ids.iter().filter(move |&&rx| rx != tx).map(move |&rx| (tx.clone(), rx.clone())))
            .collect(),
    };
    if pairs.len() < MIN_PAIRS {
        let unit = match mode {
            SensingMode::Bistatic => "pairs",
            SensingMode::Monostatic => "nodes",
        };
        return Err(OrchestrationError::InsufficientCoverage { found: pairs.len(), needed: MIN_PAIRS, unit });
    }
    Ok(pairs)
}

/// UEs able to take part in sensing of `area`, sorted by id.
pub fn select_ues<'a, I>(area: &SensingArea, nodes: I) -> Vec<NodeId>
where
    I: IntoIterator<Item = &'a MeasurementNode>,
{
    let mut ues: Vec<NodeId> =
        nodes.into_iter().filter(|n| n.is_ue() && eligible(n, area)).map(|n| n.id.clone()).collect();
    ues.sort();
    ues.dedup();
    ues
}

/// Everything the sensing control sends out when configuring a session.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigurationPlan {
    /// Distinct nodes that receive a node configuration, sorted.
    pub node_configs: Vec<NodeId>,
    pub spf_config: GeometryConfig,
    /// Measurement round offsets after configuration, in seconds.
    pub round_offsets: Vec<f64>,
}

/// Builds the configuration for an authorized session and moves it to
/// `Configured`. Rounds fire every `1/refresh_rate` seconds, the first one
/// period after configuration, until `duration` has elapsed.
pub fn configure_session(
    session: &mut SensingSession,
    pairs: Vec<Pair>,
    nodes: &[MeasurementNode],
) -> Result<ConfigurationPlan, OrchestrationError> {
    if session.state != SessionState::Authorized {
        return Err(OrchestrationError::NotAuthorized(session.state));
    }
    if pairs.len() < MIN_PAIRS {
        return Err(OrchestrationError::InsufficientCoverage { found: pairs.len(), needed: MIN_PAIRS, unit: "pairs" });
    }
    let by_id: BTreeMap<&NodeId, &MeasurementNode> = nodes.iter().map(|n| (&n.id, n)).collect();
    let mut positions = BTreeMap::new();
    for (tx, rx) in &pairs {
        for id in [tx, rx] {
            let node = by_id.get(id).ok_or_else(|| OrchestrationError::UnknownNode(id.clone()))?;
            positions.insert(id.clone(), node.position);
        }
    }
    let spf_config = GeometryConfig { positions, mode: session.request.mode, area: session.request.area };
    let period = 1.0 / session.request.refresh_rate;
    let round_offsets = (1..=session.request.requested_rounds()).map(|k| k as f64 * period).collect();
    let plan = ConfigurationPlan {
        node_configs: spf_config.positions.keys().cloned().collect(),
        spf_config: spf_config.clone(),
        round_offsets,
    };
    session.pairs = pairs;
    session.spf_config = Some(spf_config);
    session.transition(SessionState::Configured)?;
    Ok(plan)
}
