//! Executes a scenario: the sensing management flow, the offload
//! procedure and the per-cell scheduler share one kernel.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{ChannelModel, EngineError, Event, Kernel, Message, Payload, TraceRecord};
use crate::kpi::{self, KpiAccumulator, KpiError, KpiReport, Outcome, RunInfo, SessionKind, SessionReport};
use crate::model::{distance, KpiRecord, MeasurementNode, NodeId, Position, SensingMeasurement, SensingResult};
use crate::offload::{Controller, ControllerConfig, OffloadError, OffloadSession, OffloadState};
use crate::protocol::{nf, size, Body};
use crate::scheduler::{allocate, apply_sensing_share, CellResourceState, Shares};
use crate::sensing::{
    authorize, configure_session, fuse_rounds, generate_measurement, localize, meeting_quality, privacy_filter,
    select_pairs, LocalizerConfig, MeasurementNoise, RoundEstimate, SensingSession, SessionState,
};

use super::{Scenario, SensingRequestSpec};

pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("session {session}: {message}")]
    Session { session: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Export(#[from] KpiError),
    #[error("comparison needs at least two policies, got {0}")]
    TooFewPolicies(usize),
}

impl RunError {
    fn offload(session: &str, e: OffloadError) -> Self {
        RunError::Session { session: session.to_owned(), message: e.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub report: KpiReport,
    pub sensing: Vec<SensingSession>,
    pub offload: Vec<OffloadSession>,
}

impl RunOutput {
    pub fn trace_jsonl(&self) -> String {
        crate::engine::to_jsonl(&self.trace)
    }

    /// Writes the trace, `report.json` and `sessions.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), KpiError> {
        fs::create_dir_all(dir).map_err(|source| KpiError::Io { path: dir.display().to_string(), source })?;
        kpi::write(&dir.join(TRACE_FILE), self.trace_jsonl().as_bytes())?;
        self.report.export(dir)
    }
}

struct SensingRun {
    spec: SensingRequestSpec,
    session: SensingSession,
    target: Position,
    detail: Option<String>,
    reports: BTreeMap<u32, Vec<SensingMeasurement>>,
    resolved: u32,
    estimates: Vec<RoundEstimate>,
    result: Option<SensingResult>,
    finished_at: Option<f64>,
    rng: ChaCha8Rng,
}

fn sensing_subject(id: &str) -> String {
    format!("sensing/{id}")
}

struct World<'a> {
    scenario: &'a Scenario,
    nodes: Vec<MeasurementNode>,
    node_cell: BTreeMap<NodeId, String>,
    authorized: BTreeSet<NodeId>,
    sensing: BTreeMap<String, SensingRun>,
    shares: BTreeMap<String, Shares>,
    controller: Controller,
    acc: KpiAccumulator,
    control: ChannelModel,
    data: ChannelModel,
    localizer: LocalizerConfig,
    error: Option<RunError>,
}

impl World<'_> {
    fn fail(&mut self, e: RunError) {
        self.error.get_or_insert(e);
    }

    fn send_sensing(
        &mut self,
        k: &mut Kernel<Body>,
        id: &str,
        msg: Message<Body>,
        channel: ChannelModel,
    ) -> Option<f64> {
        match k.send(msg, &channel) {
            Ok(d) => {
                let delta = KpiRecord { comm_bits: d.size_bits, comm_seconds: d.transfer_time, ..KpiRecord::new(id) };
                if let Err(e) = self.acc.record(&sensing_subject(id), &delta) {
                    self.fail(e.into());
                }
                Some(d.deliver_at)
            }
            Err(e) => {
                self.fail(e.into());
                None
            }
        }
    }

    fn set_state(&mut self, k: &mut Kernel<Body>, id: &str, next: SessionState) {
        let run = self.sensing.get_mut(id).expect("known request");
        match run.session.transition(next) {
            Ok(prev) => k.log_state(&sensing_subject(id), prev, next),
            Err(e) => self.fail(RunError::Session { session: id.to_owned(), message: e.to_string() }),
        }
    }

    fn reject(&mut self, k: &mut Kernel<Body>, id: &str, detail: String) {
        self.set_state(k, id, SessionState::Rejected);
        let run = self.sensing.get_mut(id).expect("known request");
        run.detail = Some(detail);
        run.finished_at = Some(k.now());
    }

    fn dispatch(&mut self, k: &mut Kernel<Body>, event: Event<Body>) {
        let (dst, body, msg) = match event.payload {
            Payload::Deliver(m) => (m.dst.clone(), m.body.clone(), Some(m)),
            Payload::Timer { node, body } => (node, body, None),
        };
        match body {
            Body::StartSensing { request_id } => self.start_sensing(k, &request_id),
            Body::SensingRequest { request_id } => self.on_sensing_request(k, &request_id),
            Body::NodeConfig { .. } | Body::SpfConfig { .. } => {}
            Body::MeasurementRound { request_id, round } => self.on_round(k, &request_id, round),
            Body::MeasurementReport { request_id, round, measurement } => {
                self.on_report(k, &request_id, round, measurement)
            }
            Body::SensingResult { result } => self.on_result(k, result),
            Body::AllocationTick => self.on_tick(k),
            Body::WorkloadArrival { session } => self.on_arrival(k, &session),
            other => {
                let session = match &other {
                    Body::NodeFault { node } => format!("fault@{node}"),
                    Body::Advertise { capability } => format!("advertise@{}", capability.node_id),
                    _ => other.session().unwrap_or_default().to_owned(),
                };
                if let Err(e) = self.controller.handle(k, &dst, other, msg) {
                    self.fail(RunError::offload(&session, e));
                }
            }
        }
    }

    fn start_sensing(&mut self, k: &mut Kernel<Body>, id: &str) {
        let consumer = self.sensing[id].spec.request.consumer_id.clone();
        k.log_state(&sensing_subject(id), "-", SessionState::Requested);
        let msg = Message::control(
            consumer,
            nf::SEMF.into(),
            size::SENSING_REQUEST,
            Body::SensingRequest { request_id: id.to_owned() },
        );
        self.send_sensing(k, id, msg, self.control);
    }

    /// SeMF: authorization, node selection under consent, configuration of
    /// the nodes and the SPF, then round scheduling.
    fn on_sensing_request(&mut self, k: &mut Kernel<Body>, id: &str) {
        let request = self.sensing[id].spec.request.clone();
        let decision = authorize(&request, &self.authorized);
        let prev = self.sensing.get_mut(id).expect("known").session.apply_decision(decision);
        match prev {
            Ok(prev) => {
                let state = self.sensing[id].session.state();
                k.log_state(&sensing_subject(id), prev, state);
                if state == SessionState::Rejected {
                    let run = self.sensing.get_mut(id).expect("known");
                    run.detail = Some(format!("consumer {} is not authorized", request.consumer_id));
                    run.finished_at = Some(k.now());
                    return;
                }
            }
            Err(e) => return self.fail(RunError::Session { session: id.to_owned(), message: e.to_string() }),
        }
        let candidates = meeting_quality(&request, &self.nodes);
        let pairs = match select_pairs(&request.area, candidates, request.mode) {
            Ok(p) => p,
            Err(e) => return self.reject(k, id, e.to_string()),
        };
        let plan = {
            let run = self.sensing.get_mut(id).expect("known");
            configure_session(&mut run.session, pairs, &self.nodes)
        };
        let plan = match plan {
            Ok(p) => p,
            Err(e) => return self.reject(k, id, e.to_string()),
        };
        k.log_state(&sensing_subject(id), SessionState::Authorized, SessionState::Configured);

        let mut configured_at = k.now();
        for node in &plan.node_configs {
            let msg = Message::control(
                nf::SEMF.into(),
                node.clone(),
                size::NODE_CONFIG,
                Body::NodeConfig { request_id: id.to_owned() },
            );
            if let Some(t) = self.send_sensing(k, id, msg, self.control) {
                configured_at = configured_at.max(t);
            }
        }
        let bits = size::SPF_CONFIG_BASE + size::SPF_CONFIG_PER_NODE * plan.spf_config.positions.len() as f64;
        let msg =
            Message::control(nf::SEMF.into(), nf::SPF.into(), bits, Body::SpfConfig { request_id: id.to_owned() });
        if let Some(t) = self.send_sensing(k, id, msg, self.control) {
            configured_at = configured_at.max(t);
        }
        self.set_state(k, id, SessionState::Measuring);
        if plan.round_offsets.is_empty() {
            self.finish_sensing(k, id);
        }
        for (i, offset) in plan.round_offsets.iter().enumerate() {
            let body = Body::MeasurementRound { request_id: id.to_owned(), round: i as u32 + 1 };
            if let Err(e) = k.timer(configured_at + offset, nf::SEMF.into(), body) {
                self.fail(e.into());
            }
        }
    }

    fn cell_share(&self, cell: Option<&String>) -> (f64, f64) {
        let Some(cell) = cell else { return (1.0, 0.0) };
        let min = self.scenario.cells.iter().find(|c| &c.id == cell).map_or(0.0, |c| c.min_sensing_share);
        (self.shares.get(cell).map_or(1.0, |s| s.sensing), min)
    }

    /// One measurement round: every configured pair measures the target and
    /// reports to the SPF over the data plane. Starved or halved rounds are
    /// skipped.
    fn on_round(&mut self, k: &mut Kernel<Body>, id: &str, round: u32) {
        if self.sensing[id].session.state() != SessionState::Measuring {
            return;
        }
        let (share, min_share) = self.cell_share(self.sensing[id].spec.cell.as_ref());
        let noise_std = self.sensing[id].spec.noise_std;
        let skip = match apply_sensing_share(noise_std, share, min_share) {
            Ok(effect) => effect.halve_refresh && round.is_multiple_of(2),
            Err(_) => true,
        };
        if skip {
            self.resolve_round(k, id, None);
            return;
        }
        let quality: BTreeMap<&NodeId, f64> = self.nodes.iter().map(|n| (&n.id, n.quality_indicator)).collect();
        let run = self.sensing.get_mut(id).expect("known");
        let geometry = run.session.spf_config.clone().expect("configured");
        let mut out = Vec::with_capacity(run.session.pairs.len());
        for (tx, rx) in &run.session.pairs {
            let q = quality[tx].min(quality[rx]);
            let noise = MeasurementNoise { noise_std, share };
            match generate_measurement((tx, rx), &geometry, run.target, noise, q, k.now(), &mut run.rng) {
                Ok(m) => out.push(m),
                Err(e) => {
                    let message = e.to_string();
                    return self.fail(RunError::Session { session: id.to_owned(), message });
                }
            }
        }
        for m in out {
            let src = m.rx_id.clone();
            let body = Body::MeasurementReport { request_id: id.to_owned(), round, measurement: m };
            self.send_sensing(k, id, Message::data(src, nf::SPF.into(), size::MEASUREMENT_REPORT, body), self.data);
        }
    }

    /// SPF: once a round is complete, localize, apply the privacy filter and
    /// keep the estimate.
    fn on_report(&mut self, k: &mut Kernel<Body>, id: &str, round: u32, m: SensingMeasurement) {
        let run = self.sensing.get_mut(id).expect("known");
        if run.session.state() != SessionState::Measuring {
            return;
        }
        let reports = run.reports.entry(round).or_default();
        reports.push(m);
        if reports.len() < run.session.pairs.len() {
            return;
        }
        let reports = run.reports.remove(&round).expect("just filled");
        let geometry = run.session.spf_config.as_ref().expect("configured");
        let kept = localize(&reports, geometry, &self.localizer)
            .ok()
            .and_then(|e| privacy_filter(&[e], &geometry.area).into_iter().next());
        let estimate = kept.map(|estimate| RoundEstimate { estimate, timestamp: k.now() });
        self.resolve_round(k, id, estimate);
    }

    fn resolve_round(&mut self, k: &mut Kernel<Body>, id: &str, estimate: Option<RoundEstimate>) {
        let run = self.sensing.get_mut(id).expect("known");
        run.resolved += 1;
        run.estimates.extend(estimate);
        if run.resolved == run.spec.request.requested_rounds() {
            self.finish_sensing(k, id);
        }
    }

    /// Fuses the kept rounds and sends the result to the consumer. With no
    /// usable round the session completes without a result.
    fn finish_sensing(&mut self, k: &mut Kernel<Body>, id: &str) {
        let run = &self.sensing[id];
        if !run.session.may_emit_results() {
            return;
        }
        match fuse_rounds(id, &run.estimates) {
            Ok(result) => {
                let bits =
                    size::SENSING_RESULT_BASE + size::SENSING_RESULT_PER_ESTIMATE * result.estimates.len() as f64;
                let consumer = run.spec.request.consumer_id.clone();
                let msg = Message::control(nf::SPF.into(), consumer, bits, Body::SensingResult { result });
                self.send_sensing(k, id, msg, self.control);
            }
            Err(_) => {
                self.set_state(k, id, SessionState::Completed);
                self.sensing.get_mut(id).expect("known").finished_at = Some(k.now());
            }
        }
    }

    fn on_result(&mut self, k: &mut Kernel<Body>, result: SensingResult) {
        let id = result.request_id.clone();
        self.set_state(k, &id, SessionState::Completed);
        let run = self.sensing.get_mut(&id).expect("known");
        run.finished_at = Some(k.now());
        run.result = Some(result);
    }

    fn on_tick(&mut self, k: &mut Kernel<Body>) {
        let now = k.now();
        for cell in &self.scenario.cells {
            let state = CellResourceState {
                cell_id: cell.id.clone(),
                comm_demand: cell.comm_demand_at(now),
                sensing_demand: cell.sensing_demand,
                w_comm: cell.w_comm,
                w_sens: cell.w_sens,
            };
            let shares = allocate(&state);
            k.log(TraceRecord::Allocation {
                time: now,
                cell: cell.id.clone(),
                comm_demand: state.comm_demand,
                sensing_demand: state.sensing_demand,
                comm_share: shares.comm,
                sensing_share: shares.sensing,
            });
            self.shares.insert(cell.id.clone(), shares);
        }
        for (node, cell) in &self.node_cell {
            self.controller.set_comm_share(node.clone(), self.shares[cell].comm);
        }
        if let Err(e) = self.controller.resume_stalled(k) {
            self.fail(RunError::offload("stalled transfers", e));
        }
        let next = now + self.scenario.allocation_tick;
        if next < self.scenario.duration {
            if let Err(e) = k.timer(next, nf::SCHEDULER.into(), Body::AllocationTick) {
                self.fail(e.into());
            }
        }
    }

    fn on_arrival(&mut self, k: &mut Kernel<Body>, id: &str) {
        let spec = self.scenario.workloads.iter().find(|w| w.workload.workload_id == id).expect("known workload");
        let route =
            spec.route_via.as_ref().and_then(|r| self.scenario.routing_nodes.iter().find(|n| &n.id == r)).cloned();
        if let Err(e) = self.controller.submit(k, spec.workload.clone(), spec.offloader.clone(), route) {
            self.fail(RunError::offload(id, e));
        }
    }

    fn sensing_reports(&self, seed: u64) -> Vec<SessionReport> {
        self.sensing
            .iter()
            .map(|(id, run)| {
                let outcome = match run.session.state() {
                    SessionState::Completed => Outcome::Completed,
                    SessionState::Rejected => Outcome::Rejected,
                    _ => Outcome::Incomplete,
                };
                let mut record =
                    self.acc.get(&sensing_subject(id)).cloned().unwrap_or_else(|| KpiRecord::new(sensing_subject(id)));
                if let (Outcome::Completed, Some(t)) = (outcome, run.finished_at) {
                    record.latency = t - run.spec.start;
                }
                let mut s = SessionReport::new(seed, id.clone(), SessionKind::Sensing, outcome, record);
                s.rounds_requested = run.spec.request.requested_rounds();
                if outcome == Outcome::Completed {
                    s.rounds_delivered = run.estimates.len() as u32;
                    s.position_error =
                        run.result.as_ref().and_then(|r| r.estimates.first()).map(|e| distance(e.position, run.target));
                }
                s.detail = run.detail.clone();
                s
            })
            .collect()
    }

    fn offload_reports(&self, seed: u64) -> Vec<SessionReport> {
        self.controller
            .sessions()
            .map(|s| {
                let outcome = match s.state() {
                    OffloadState::Done => Outcome::Completed,
                    OffloadState::Failed => Outcome::Failed,
                    _ => Outcome::Incomplete,
                };
                let mut r = SessionReport::new(seed, s.id(), SessionKind::Offload, outcome, s.kpi());
                r.attempts = s.attempts();
                if outcome == Outcome::Failed {
                    r.detail = Some("no feasible compute node".into());
                }
                r
            })
            .collect()
    }
}

/// Runs `scenario` to its horizon. Sessions still open at the horizon are
/// reported as incomplete.
pub fn run(scenario: &Scenario) -> Result<RunOutput, RunError> {
    let mut k: Kernel<Body> = Kernel::new(scenario.seed);
    for id in nf::RESERVED {
        k.register(id.into());
    }
    let ids = scenario
        .measurement_nodes
        .iter()
        .map(|m| m.node.id.clone())
        .chain(scenario.compute_nodes.iter().map(|c| c.node_id.clone()))
        .chain(scenario.routing_nodes.iter().map(|r| r.id.clone()))
        .chain(scenario.consumers.iter().map(|c| c.id.clone()));
    for id in ids {
        k.register(id);
    }

    let control = scenario.channels.control();
    let controller =
        Controller::new(ControllerConfig { policy: scenario.policy, multi_node_k: scenario.multi_node_k, control });
    let targets: BTreeMap<&str, Position> = scenario.targets.iter().map(|t| (t.id.as_str(), t.position)).collect();
    let sensing = scenario
        .sensing_requests
        .iter()
        .map(|spec| {
            let id = spec.request.request_id.clone();
            let run = SensingRun {
                spec: spec.clone(),
                session: SensingSession::new(spec.request.clone()),
                target: targets[spec.target.as_str()],
                detail: None,
                reports: BTreeMap::new(),
                resolved: 0,
                estimates: Vec::new(),
                result: None,
                finished_at: None,
                rng: k.rng(&format!("measurement/{id}")),
            };
            (id, run)
        })
        .collect();
    let mut world = World {
        scenario,
        nodes: scenario.measurement_nodes(),
        node_cell: scenario
            .measurement_nodes
            .iter()
            .filter_map(|m| m.cell.clone().map(|c| (m.node.id.clone(), c)))
            .collect(),
        authorized: scenario.consumers.iter().filter(|c| c.authorized).map(|c| c.id.clone()).collect(),
        sensing,
        shares: BTreeMap::new(),
        controller,
        acc: KpiAccumulator::new(),
        control,
        data: scenario.channels.data(),
        localizer: LocalizerConfig::default(),
        error: None,
    };

    k.timer(0.0, nf::SCHEDULER.into(), Body::AllocationTick)?;
    for cap in &scenario.compute_nodes {
        world.controller.advertise(&mut k, cap.clone()).map_err(|e| RunError::offload("advertise", e))?;
    }
    for spec in &scenario.sensing_requests {
        let id = spec.request.request_id.clone();
        k.timer(spec.start, spec.request.consumer_id.clone(), Body::StartSensing { request_id: id })?;
    }
    for spec in &scenario.workloads {
        let session = spec.workload.workload_id.clone();
        k.timer(spec.arrival, spec.offloader.clone(), Body::WorkloadArrival { session })?;
    }
    for fault in &scenario.faults {
        k.timer(fault.at, fault.node.clone(), Body::NodeFault { node: fault.node.clone() })?;
    }

    k.run_until(scenario.duration, |k, e| world.dispatch(k, e));
    if let Some(e) = world.error.take() {
        return Err(e);
    }

    let mut sessions = world.sensing_reports(scenario.seed);
    sessions.extend(world.offload_reports(scenario.seed));
    let report =
        KpiReport::from_sessions(RunInfo { seed: scenario.seed, policy: scenario.policy.name().to_owned() }, sessions);
    Ok(RunOutput {
        trace: k.trace().to_vec(),
        report,
        sensing: world.sensing.into_values().map(|r| r.session).collect(),
        offload: world.controller.sessions().cloned().collect(),
    })
}
