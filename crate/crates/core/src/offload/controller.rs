//! Event-driven offload procedure on top of the kernel.
//!
//! The controller plays the compute offload controlling node (capability
//! registry and decisions, control plane only) and drives each session's
//! offloading node, routing hop and computing nodes through their
//! message exchanges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::{ChannelModel, Delivery, Kernel, Message, Plane};
use crate::model::{ComputeCapability, ComputeWorkload, KpiRecord, NodeId};
use crate::protocol::{nf, size, Body, BranchRef};
use crate::scheduler::{apply_comm_share, CommEffect};

use super::estimate::compute_time;
use super::registry::CapabilityRegistry;
use super::select::{select_compute_nodes, Policy};
use super::{OffloadError, OffloadState};

/// Optional forwarding hop between offloader and computing nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingNode {
    pub id: NodeId,
    /// Latency added by each hop into or out of the router.
    pub hop_latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub policy: Policy,
    /// Number of computing nodes for multi-node traffic classes.
    pub multi_node_k: usize,
    pub control: ChannelModel,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    node: NodeId,
    share: ComputeWorkload,
    compute_started: Option<f64>,
    compute_time: f64,
    computed: bool,
    result_received: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadSession {
    pub workload: ComputeWorkload,
    pub offloader_id: NodeId,
    pub chosen_node_ids: Vec<NodeId>,
    pub route_via: Option<RoutingNode>,
    state: OffloadState,
    attempt: u32,
    iteration: u32,
    branches: Vec<Branch>,
    excluded: BTreeSet<NodeId>,
    first_send: Option<f64>,
    finished_at: Option<f64>,
    signalling: KpiRecord,
    attempts: Vec<KpiRecord>,
}

impl OffloadSession {
    fn new(workload: ComputeWorkload, offloader_id: NodeId, route_via: Option<RoutingNode>) -> Self {
        let subject = subject(&workload.workload_id);
        Self {
            workload,
            offloader_id,
            chosen_node_ids: Vec::new(),
            route_via,
            state: OffloadState::DiscoveryPhase1,
            attempt: 0,
            iteration: 0,
            branches: Vec::new(),
            excluded: BTreeSet::new(),
            first_send: None,
            finished_at: None,
            signalling: KpiRecord::new(subject),
            attempts: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.workload.workload_id
    }

    pub fn state(&self) -> OffloadState {
        self.state
    }

    /// Number of task attempts started so far.
    pub fn attempts(&self) -> u32 {
        self.attempt
    }

    pub fn attempt_records(&self) -> &[KpiRecord] {
        &self.attempts
    }

    /// Nodes that failed while holding this session's work.
    pub fn excluded(&self) -> &BTreeSet<NodeId> {
        &self.excluded
    }

    pub fn first_send(&self) -> Option<f64> {
        self.first_send
    }

    pub fn finished_at(&self) -> Option<f64> {
        self.finished_at
    }

    /// First offloaded bit to last received result bit, across all attempts.
    pub fn measured_latency(&self) -> Option<f64> {
        Some(self.finished_at? - self.first_send?)
    }

    /// Session totals: signalling plus every attempt.
    pub fn kpi(&self) -> KpiRecord {
        let mut total = KpiRecord::new(self.signalling.subject_id.clone());
        total.add(&self.signalling);
        for a in &self.attempts {
            total.add(a);
        }
        total.latency = self.measured_latency().unwrap_or(0.0);
        total
    }

    fn current(&mut self) -> &mut KpiRecord {
        self.attempts.last_mut().expect("an attempt is open")
    }
}

pub fn subject(workload_id: &str) -> String {
    format!("offload/{workload_id}")
}

struct Stalled {
    session: String,
    msg: Message<Body>,
    base: ChannelModel,
}

pub struct Controller {
    config: ControllerConfig,
    registry: CapabilityRegistry,
    sessions: BTreeMap<String, OffloadSession>,
    down: BTreeSet<NodeId>,
    parked: Vec<String>,
    comm_share: BTreeMap<NodeId, f64>,
    stalled: Vec<Stalled>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        Self {
            config,
            registry: CapabilityRegistry::new(),
            sessions: BTreeMap::new(),
            down: BTreeSet::new(),
            parked: Vec::new(),
            comm_share: BTreeMap::new(),
            stalled: Vec::new(),
        }
    }

    pub fn registry(&self) -> &CapabilityRegistry {
        &self.registry
    }

    pub fn session(&self, id: &str) -> Option<&OffloadSession> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &OffloadSession> {
        self.sessions.values()
    }

    pub fn is_down(&self, node: &NodeId) -> bool {
        self.down.contains(node)
    }

    /// Communication share granted to `node`'s cell; scales the data-plane
    /// bandwidth of transfers it sends or receives.
    pub fn set_comm_share(&mut self, node: NodeId, share: f64) {
        self.comm_share.insert(node, share);
    }

    fn transition(&mut self, k: &mut Kernel<Body>, id: &str, next: OffloadState) -> Result<(), OffloadError> {
        let s = self.sessions.get_mut(id).ok_or_else(|| OffloadError::UnknownSession(id.to_owned()))?;
        if !s.state.can_become(next) {
            return Err(OffloadError::IllegalTransition { session: id.to_owned(), from: s.state, to: next });
        }
        k.log_state(&subject(id), s.state, next);
        s.state = next;
        Ok(())
    }

    fn control(
        &self,
        k: &mut Kernel<Body>,
        src: NodeId,
        dst: NodeId,
        bits: f64,
        body: Body,
    ) -> Result<Delivery, OffloadError> {
        Ok(k.send(Message::control(src, dst, bits, body), &self.config.control)?)
    }

    /// Stage 1: a computing node reports its capabilities to the controller.
    pub fn advertise(&self, k: &mut Kernel<Body>, capability: ComputeCapability) -> Result<(), OffloadError> {
        let src = capability.node_id.clone();
        self.control(k, src, nf::COC.into(), size::ADVERTISE, Body::Advertise { capability })?;
        Ok(())
    }

    /// The controller records an advertisement and answers any requests
    /// that were waiting for a first capability.
    pub fn on_advertise(&mut self, k: &mut Kernel<Body>, capability: ComputeCapability) -> Result<(), OffloadError> {
        self.registry.advertise(capability, k.now());
        for id in std::mem::take(&mut self.parked) {
            self.on_request(k, &id)?;
        }
        Ok(())
    }

    /// A workload arrives at its offloading node, which asks the controller
    /// for computing nodes (stage 2).
    pub fn submit(
        &mut self,
        k: &mut Kernel<Body>,
        workload: ComputeWorkload,
        offloader: NodeId,
        route_via: Option<RoutingNode>,
    ) -> Result<(), OffloadError> {
        let id = workload.workload_id.clone();
        self.sessions.insert(id.clone(), OffloadSession::new(workload, offloader.clone(), route_via));
        k.log_state(&subject(&id), "-", OffloadState::DiscoveryPhase1);
        let d = self.control(
            k,
            offloader,
            nf::COC.into(),
            size::OFFLOAD_REQUEST,
            Body::OffloadRequest { session: id.clone() },
        )?;
        self.charge_signalling(&id, &d);
        self.transition(k, &id, OffloadState::DiscoveryPhase2)
    }

    /// Opens a session whose computing nodes are already decided and starts
    /// the transfer at the current time, skipping the request round trip.
    pub fn start_granted(
        &mut self,
        k: &mut Kernel<Body>,
        workload: ComputeWorkload,
        offloader: NodeId,
        route_via: Option<RoutingNode>,
        nodes: Vec<NodeId>,
    ) -> Result<(), OffloadError> {
        let id = workload.workload_id.clone();
        self.sessions.insert(id.clone(), OffloadSession::new(workload, offloader, route_via));
        k.log_state(&subject(&id), "-", OffloadState::DiscoveryPhase1);
        self.transition(k, &id, OffloadState::DiscoveryPhase2)?;
        self.on_grant(k, &id, 1, nodes)
    }

    fn charge_signalling(&mut self, id: &str, d: &Delivery) {
        if let Some(s) = self.sessions.get_mut(id) {
            s.signalling.comm_bits += d.size_bits;
            s.signalling.comm_seconds += d.transfer_time;
        }
    }

    /// The controller decides on computing nodes among those that have
    /// advertised and grants them to the offloader.
    pub fn on_request(&mut self, k: &mut Kernel<Body>, id: &str) -> Result<(), OffloadError> {
        if self.registry.is_empty() {
            self.parked.push(id.to_owned());
            return Ok(());
        }
        let s = self.sessions.get(id).ok_or_else(|| OffloadError::UnknownSession(id.to_owned()))?;
        let exclude: BTreeSet<NodeId> = self.down.union(&s.excluded).cloned().collect();
        match select_compute_nodes(&s.workload, &self.registry, self.config.policy, self.config.multi_node_k, &exclude)
        {
            Ok(nodes) => self.grant(k, id, nodes),
            Err(OffloadError::NoFeasibleNode(_)) => self.transition(k, id, OffloadState::Failed),
            Err(e) => Err(e),
        }
    }

    fn grant(&mut self, k: &mut Kernel<Body>, id: &str, nodes: Vec<NodeId>) -> Result<(), OffloadError> {
        let s = &self.sessions[id];
        let bits = size::OFFLOAD_GRANT_BASE + size::OFFLOAD_GRANT_PER_NODE * nodes.len() as f64;
        let body = Body::OffloadGrant { session: id.to_owned(), attempt: s.attempt + 1, nodes };
        let d = self.control(k, nf::COC.into(), s.offloader_id.clone(), bits, body)?;
        self.charge_signalling(id, &d);
        Ok(())
    }

    /// The offloader receives the decision and starts stage 3.
    pub fn on_grant(
        &mut self,
        k: &mut Kernel<Body>,
        id: &str,
        attempt: u32,
        nodes: Vec<NodeId>,
    ) -> Result<(), OffloadError> {
        let s = self.sessions.get_mut(id).ok_or_else(|| OffloadError::UnknownSession(id.to_owned()))?;
        if attempt != s.attempt + 1 {
            return Ok(());
        }
        s.attempt = attempt;
        s.iteration = 0;
        s.chosen_node_ids = nodes;
        s.attempts.push(KpiRecord::new(subject(id)));
        self.transition(k, id, OffloadState::Offloading)?;
        self.execute_offload(k, id)
    }

    fn data_channel(
        &self,
        session: &OffloadSession,
        node: &NodeId,
        uplink: bool,
    ) -> Result<ChannelModel, OffloadError> {
        let cap = self.registry.capability(node).ok_or_else(|| OffloadError::NotAdvertised(node.clone()))?;
        let bw = if uplink { cap.link_bw_up } else { cap.link_bw_down };
        let latency = session.route_via.as_ref().map_or(0.0, |r| r.hop_latency);
        Ok(ChannelModel::new(Plane::Data, latency, bw))
    }

    /// Sends a data-plane transfer scaled by the offloader's comm share,
    /// parking it while the share is zero.
    fn send_data(
        &mut self,
        k: &mut Kernel<Body>,
        id: &str,
        msg: Message<Body>,
        base: ChannelModel,
    ) -> Result<Option<Delivery>, OffloadError> {
        let offloader = &self.sessions[id].offloader_id;
        let share = self.comm_share.get(offloader).copied().unwrap_or(1.0);
        let channel = match apply_comm_share(share.clamp(0.0, 1.0), &base) {
            Ok(CommEffect::Channel(ch)) => ch,
            _ => {
                self.stalled.push(Stalled { session: id.to_owned(), msg, base });
                return Ok(None);
            }
        };
        let is_task = matches!(msg.body, Body::TaskTransfer { .. });
        let d = k.send(msg, &channel)?;
        let s = self.sessions.get_mut(id).expect("session exists");
        if is_task && s.first_send.is_none() {
            s.first_send = Some(d.start);
        }
        let rec = s.current();
        rec.comm_bits += d.size_bits;
        rec.comm_seconds += d.transfer_time;
        Ok(Some(d))
    }

    /// Retries transfers parked on a zero comm share.
    pub fn resume_stalled(&mut self, k: &mut Kernel<Body>) -> Result<(), OffloadError> {
        for st in std::mem::take(&mut self.stalled) {
            let live = self.sessions.get(&st.session).is_some_and(|s| {
                matches!(s.state, OffloadState::Offloading | OffloadState::Computing | OffloadState::Returning)
            });
            if live {
                self.send_data(k, &st.session, st.msg, st.base)?;
            }
        }
        Ok(())
    }

    /// Stage 3: sends the current iteration's task to every chosen node,
    /// split evenly across them.
    pub fn execute_offload(&mut self, k: &mut Kernel<Body>, id: &str) -> Result<(), OffloadError> {
        let s = self.sessions.get_mut(id).ok_or_else(|| OffloadError::UnknownSession(id.to_owned()))?;
        if s.state != OffloadState::Offloading {
            return Err(OffloadError::WrongState {
                session: id.to_owned(),
                state: s.state,
                expected: OffloadState::Offloading,
            });
        }
        let share = s.workload.split(s.chosen_node_ids.len());
        s.branches = s
            .chosen_node_ids
            .iter()
            .map(|node| Branch {
                node: node.clone(),
                share: share.clone(),
                compute_started: None,
                compute_time: 0.0,
                computed: false,
                result_received: false,
            })
            .collect();
        let (attempt, iteration) = (s.attempt, s.iteration);
        let session = self.sessions[id].clone();
        for (branch, b) in session.branches.iter().enumerate() {
            let at = BranchRef { attempt, iteration, branch };
            let next_hop = session.route_via.as_ref().map_or(b.node.clone(), |r| r.id.clone());
            let body = Body::TaskTransfer { session: id.to_owned(), at, target: b.node.clone() };
            let msg = Message::data(session.offloader_id.clone(), next_hop, b.share.payload_bits, body);
            let channel = self.data_channel(&session, &b.node, true)?;
            if self.send_data(k, id, msg, channel)?.is_some() {
                let epb = self.registry.capability(&b.node).map_or(0.0, |c| c.energy_per_bit);
                self.sessions.get_mut(id).expect("exists").current().energy_comm += b.share.payload_bits * epb;
            }
        }
        Ok(())
    }

    fn is_live(&self, id: &str, at: BranchRef) -> bool {
        self.sessions.get(id).is_some_and(|s| {
            s.attempt == at.attempt
                && s.iteration == at.iteration
                && matches!(s.state, OffloadState::Offloading | OffloadState::Computing | OffloadState::Returning)
        })
    }

    /// A task or result reached a router: forward it without re-serializing.
    pub fn forward(&mut self, k: &mut Kernel<Body>, msg: Message<Body>) -> Result<(), OffloadError> {
        let (id, at) = match &msg.body {
            Body::TaskTransfer { session, at, .. } | Body::ResultTransfer { session, at, .. } => (session.clone(), *at),
            _ => return Ok(()),
        };
        if !self.is_live(&id, at) {
            return Ok(());
        }
        let hop = self.sessions[&id].route_via.as_ref().map_or(0.0, |r| r.hop_latency);
        let target = match &msg.body {
            Body::TaskTransfer { target, .. } | Body::ResultTransfer { target, .. } => target.clone(),
            _ => unreachable!(),
        };
        let fwd = Message { src: msg.dst.clone(), dst: target, ..msg };
        k.send(fwd, &ChannelModel::forwarding(Plane::Data, hop))?;
        Ok(())
    }

    /// A computing node received its branch payload and starts executing.
    pub fn on_task(&mut self, k: &mut Kernel<Body>, id: &str, at: BranchRef) -> Result<(), OffloadError> {
        if !self.is_live(id, at) {
            return Ok(());
        }
        let node = self.sessions[id].branches[at.branch].node.clone();
        let cap = self.registry.capability(&node).ok_or_else(|| OffloadError::NotAdvertised(node.clone()))?;
        let flops = self.sessions[id].branches[at.branch].share.flops;
        let duration = compute_time(flops, cap)?;
        if self.sessions[id].state == OffloadState::Offloading {
            self.transition(k, id, OffloadState::Computing)?;
        }
        let now = k.now();
        let b = &mut self.sessions.get_mut(id).expect("exists").branches[at.branch];
        b.compute_started = Some(now);
        b.compute_time = duration;
        k.timer(now + duration, node, Body::ComputeComplete { session: id.to_owned(), at })?;
        Ok(())
    }

    /// Execution finished: account the work and return the result.
    pub fn on_compute_complete(&mut self, k: &mut Kernel<Body>, id: &str, at: BranchRef) -> Result<(), OffloadError> {
        if !self.is_live(id, at) {
            return Ok(());
        }
        let s = self.sessions.get_mut(id).expect("live session exists");
        let b = &mut s.branches[at.branch];
        b.computed = true;
        let (node, flops, result_bits) = (b.node.clone(), b.share.flops, b.share.result_bits);
        let cap = self.registry.capability(&node).ok_or_else(|| OffloadError::NotAdvertised(node.clone()))?.clone();
        let rec = s.current();
        rec.compute_flops += flops;
        rec.energy_compute += flops * cap.energy_per_flop;
        let all_computed = s.branches.iter().all(|b| b.computed);

        let session = s.clone();
        let next_hop = session.route_via.as_ref().map_or(session.offloader_id.clone(), |r| r.id.clone());
        let body = Body::ResultTransfer { session: id.to_owned(), at, target: session.offloader_id.clone() };
        let msg = Message::data(node.clone(), next_hop, result_bits, body);
        let channel = self.data_channel(&session, &node, false)?;
        if self.send_data(k, id, msg, channel)?.is_some() {
            self.sessions.get_mut(id).expect("exists").current().energy_comm += result_bits * cap.energy_per_bit;
        }
        if all_computed {
            self.transition(k, id, OffloadState::Returning)?;
        }
        Ok(())
    }

    /// A result reached the offloader. Completes the iteration once every
    /// branch has reported, then either loops or finishes the session.
    pub fn on_result(&mut self, k: &mut Kernel<Body>, id: &str, at: BranchRef) -> Result<(), OffloadError> {
        if !self.is_live(id, at) {
            return Ok(());
        }
        let s = self.sessions.get_mut(id).expect("live session exists");
        s.branches[at.branch].result_received = true;
        if !s.branches.iter().all(|b| b.result_received) {
            return Ok(());
        }
        if s.iteration + 1 < s.workload.iterations {
            s.iteration += 1;
            self.transition(k, id, OffloadState::Offloading)?;
            return self.execute_offload(k, id);
        }
        s.finished_at = Some(k.now());
        let latency = s.measured_latency().unwrap_or(0.0);
        if let Some(last) = s.attempts.last_mut() {
            last.latency = latency;
        }
        self.transition(k, id, OffloadState::Done)
    }

    /// A computing node fails. Every session still waiting on work from it
    /// abandons the attempt (partially executed work is still charged) and
    /// is reassigned.
    pub fn on_fault(&mut self, k: &mut Kernel<Body>, node: &NodeId) -> Result<(), OffloadError> {
        self.down.insert(node.clone());
        let now = k.now();
        let affected: Vec<String> = self
            .sessions
            .values()
            .filter(|s| matches!(s.state, OffloadState::Offloading | OffloadState::Computing))
            .filter(|s| s.branches.iter().any(|b| &b.node == node && !b.computed))
            .map(|s| s.id().to_owned())
            .collect();
        for id in affected {
            let s = self.sessions.get_mut(&id).expect("exists");
            let mut wasted = (0.0, 0.0);
            for b in s.branches.iter().filter(|b| !b.computed) {
                if let Some(start) = b.compute_started {
                    let fraction =
                        if b.compute_time > 0.0 { ((now - start) / b.compute_time).clamp(0.0, 1.0) } else { 1.0 };
                    let epf = self.registry.capability(&b.node).map_or(0.0, |c| c.energy_per_flop);
                    wasted.0 += b.share.flops * fraction;
                    wasted.1 += b.share.flops * fraction * epf;
                }
            }
            s.excluded.insert(node.clone());
            let first_send = s.first_send.unwrap_or(now);
            let rec = s.current();
            rec.compute_flops += wasted.0;
            rec.energy_compute += wasted.1;
            rec.latency = now - first_send;
            self.transition(k, &id, OffloadState::Failed)?;
            self.reassign_on_failure(k, &id)?;
        }
        Ok(())
    }

    /// Re-runs selection without the failed node(s) and restarts the whole
    /// task. With no alternative the session stays `Failed`.
    pub fn reassign_on_failure(&mut self, k: &mut Kernel<Body>, id: &str) -> Result<(), OffloadError> {
        let s = self.sessions.get(id).ok_or_else(|| OffloadError::UnknownSession(id.to_owned()))?;
        if s.state != OffloadState::Failed {
            return Err(OffloadError::WrongState {
                session: id.to_owned(),
                state: s.state,
                expected: OffloadState::Failed,
            });
        }
        let exclude: BTreeSet<NodeId> = self.down.union(&s.excluded).cloned().collect();
        match select_compute_nodes(&s.workload, &self.registry, self.config.policy, self.config.multi_node_k, &exclude)
        {
            Ok(nodes) => {
                self.transition(k, id, OffloadState::Reassigned)?;
                self.grant(k, id, nodes)
            }
            Err(OffloadError::NoFeasibleNode(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Routes offload-related events; returns `false` for events that
    /// belong to someone else.
    pub fn handle(
        &mut self,
        k: &mut Kernel<Body>,
        dst: &NodeId,
        body: Body,
        msg: Option<Message<Body>>,
    ) -> Result<bool, OffloadError> {
        match body {
            Body::Advertise { capability } => self.on_advertise(k, capability)?,
            Body::OffloadRequest { session } => self.on_request(k, &session)?,
            Body::OffloadGrant { session, attempt, nodes } => self.on_grant(k, &session, attempt, nodes)?,
            Body::TaskTransfer { ref session, at, ref target }
            | Body::ResultTransfer { ref session, at, ref target }
                if target != dst =>
            {
                let _ = (session, at);
                if let Some(m) = msg {
                    self.forward(k, Message { body, ..m })?;
                }
            }
            Body::TaskTransfer { session, at, .. } => self.on_task(k, &session, at)?,
            Body::ResultTransfer { session, at, .. } => self.on_result(k, &session, at)?,
            Body::ComputeComplete { session, at } => self.on_compute_complete(k, &session, at)?,
            Body::NodeFault { node } => self.on_fault(k, &node)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
