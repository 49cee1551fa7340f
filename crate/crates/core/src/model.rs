//! Domain types shared by every subsystem: plane geometry, measurement nodes,
//! sensing requests and results, compute workloads and capabilities, and the
//! per-subject KPI record.
//!
//! All types are plain values. Constructors do not validate; call
//! `validate()` where input comes from outside the process.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{what} must be finite, got {value}")]
    NotFinite { what: &'static str, value: f64 },
    #[error("{what} must be strictly positive, got {value}")]
    NotPositive { what: &'static str, value: f64 },
    #[error("{what} must be non-negative, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("{what} must lie in [0, 1], got {value}")]
    OutOfUnitRange { what: &'static str, value: f64 },
    #[error("base station {0} cannot withhold consent")]
    BaseStationConsent(NodeId),
}

fn finite(what: &'static str, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::NotFinite { what, value })
    }
}

fn positive(what: &'static str, value: f64) -> Result<(), ModelError> {
    if finite(what, value)? > 0.0 {
        Ok(())
    } else {
        Err(ModelError::NotPositive { what, value })
    }
}

fn non_negative(what: &'static str, value: f64) -> Result<(), ModelError> {
    if finite(what, value)? >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::Negative { what, value })
    }
}

fn unit(what: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&finite(what, value)?) {
        Ok(())
    } else {
        Err(ModelError::OutOfUnitRange { what, value })
    }
}

/// Identifier of any simulated node (measurement node, compute node,
/// router, consumer, or one of the network functions).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// A point in the 2-D simulation plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        finite("position.x", self.x)?;
        finite("position.y", self.y)?;
        Ok(())
    }

    pub fn distance(&self, other: &Position) -> f64 {
        distance(*self, *other)
    }
}

/// Euclidean distance between two positions.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    BaseStation,
    UserEquipment,
}

/// A base station or UE able to transmit and receive sensing signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: Position,
    pub coverage_radius: f64,
    /// Participation level in sensing, normalized to [0, 1].
    pub quality_indicator: f64,
    pub consent: bool,
    pub authorized: bool,
    pub uplink_bw: f64,
    pub downlink_bw: f64,
}

impl MeasurementNode {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.position.validate()?;
        positive("coverage_radius", self.coverage_radius)?;
        unit("quality_indicator", self.quality_indicator)?;
        positive("uplink_bw", self.uplink_bw)?;
        positive("downlink_bw", self.downlink_bw)?;
        if self.kind == NodeKind::BaseStation && !self.consent {
            return Err(ModelError::BaseStationConsent(self.id.clone()));
        }
        Ok(())
    }

    pub fn is_ue(&self) -> bool {
        self.kind == NodeKind::UserEquipment
    }
}

/// Circular area the consumer wants sensed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingArea {
    pub center: Position,
    pub radius: f64,
}

impl SensingArea {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.center.validate()?;
        positive("area.radius", self.radius)
    }

    pub fn contains(&self, p: Position) -> bool {
        distance(p, self.center) <= self.radius
    }
}

/// True iff the node's coverage disk contains the whole area disk.
pub fn covers(node: &MeasurementNode, area: &SensingArea) -> bool {
    distance(node.position, area.center) + area.radius <= node.coverage_radius
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensingMode {
    /// Transmitter and receiver on separate nodes.
    Bistatic,
    /// Transmitter and receiver on the same node.
    Monostatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingRequest {
    pub request_id: String,
    pub consumer_id: NodeId,
    pub area: SensingArea,
    pub mode: SensingMode,
    pub refresh_rate: f64,
    pub duration: f64,
    pub min_quality: f64,
}

impl SensingRequest {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.area.validate()?;
        positive("refresh_rate", self.refresh_rate)?;
        positive("duration", self.duration)?;
        unit("min_quality", self.min_quality)
    }

    /// Number of measurement rounds the request asks for (rate x duration).
    pub fn requested_rounds(&self) -> u32 {
        // Guard against 2.9999999 from products like 0.1 * 30.
        (self.refresh_rate * self.duration + 1e-9).floor() as u32
    }
}

/// One bistatic (or monostatic) range report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingMeasurement {
    pub tx_id: NodeId,
    pub rx_id: NodeId,
    pub range: f64,
    pub quality: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub position: Position,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingResult {
    pub request_id: String,
    pub estimates: Vec<Estimate>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    OneTimeOneNode,
    OneTimeMultiNode,
    MultiIterationOneNode,
    MultiIterationMultiNode,
}

impl TrafficClass {
    pub fn is_multi_node(self) -> bool {
        matches!(self, Self::OneTimeMultiNode | Self::MultiIterationMultiNode)
    }

    pub fn is_multi_iteration(self) -> bool {
        matches!(self, Self::MultiIterationOneNode | Self::MultiIterationMultiNode)
    }
}

/// Quantization level of the compute data and operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Int8,
    Fp16,
    Fp32,
    Fp64,
}

/// Quality-of-compute-service class. Only latency-sensitive work carries a
/// deadline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum QosClass {
    LatencySensitive { deadline: f64 },
    PrecisionSensitive,
}

impl QosClass {
    pub fn deadline(&self) -> Option<f64> {
        match self {
            QosClass::LatencySensitive { deadline } => Some(*deadline),
            QosClass::PrecisionSensitive => None,
        }
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeWorkload {
    pub workload_id: String,
    pub traffic_class: TrafficClass,
    pub flops: f64,
    pub memory: f64,
    pub payload_bits: f64,
    pub result_bits: f64,
    pub precision: Precision,
    pub qos: QosClass,
    /// Number of offload/compute/return exchanges; 1 for one-time classes.
    #[serde(default = "one")]
    pub iterations: u32,
}

impl ComputeWorkload {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("flops", self.flops)?;
        positive("memory", self.memory)?;
        positive("payload_bits", self.payload_bits)?;
        positive("result_bits", self.result_bits)?;
        if let Some(deadline) = self.qos.deadline() {
            positive("deadline", deadline)?;
        }
        if self.iterations == 0 {
            return Err(ModelError::NotPositive { what: "iterations", value: 0.0 });
        }
        Ok(())
    }

    /// The share of this workload handled by one of `branches` nodes:
    /// payload, result and flops divide evenly, the memory footprint does not.
    pub fn split(&self, branches: usize) -> ComputeWorkload {
        let k = branches.max(1) as f64;
        ComputeWorkload {
            flops: self.flops / k,
            payload_bits: self.payload_bits / k,
            result_bits: self.result_bits / k,
            ..self.clone()
        }
    }
}

/// Resources a Computing Node advertises to the offload controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeCapability {
    pub node_id: NodeId,
    pub flops_per_second: f64,
    pub memory_bytes: f64,
    pub supported_precisions: BTreeSet<Precision>,
    pub link_bw_up: f64,
    pub link_bw_down: f64,
    pub energy_per_flop: f64,
    pub energy_per_bit: f64,
    pub current_load: f64,
}

impl ComputeCapability {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("flops_per_second", self.flops_per_second)?;
        positive("memory_bytes", self.memory_bytes)?;
        positive("link_bw_up", self.link_bw_up)?;
        positive("link_bw_down", self.link_bw_down)?;
        non_negative("energy_per_flop", self.energy_per_flop)?;
        non_negative("energy_per_bit", self.energy_per_bit)?;
        unit("current_load", self.current_load)
    }
}

/// Energy, latency, communication and computation accounting for one subject.
///
/// Total energy is always derived from its two components, so the
/// decomposition cannot drift.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KpiRecord {
    pub subject_id: String,
    pub energy_compute: f64,
    pub energy_comm: f64,
    pub latency: f64,
    /// Bits put on the wire.
    pub comm_bits: f64,
    /// Serialization time of those bits, in seconds.
    pub comm_seconds: f64,
    /// Floating-point operations executed.
    pub compute_flops: f64,
}

impl KpiRecord {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Self { subject_id: subject_id.into(), ..Default::default() }
    }

    pub fn energy(&self) -> f64 {
        self.energy_compute + self.energy_comm
    }

    pub(crate) fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("energy_compute", self.energy_compute),
            ("energy_comm", self.energy_comm),
            ("latency", self.latency),
            ("comm_bits", self.comm_bits),
            ("comm_seconds", self.comm_seconds),
            ("compute_flops", self.compute_flops),
        ]
    }

    pub fn add(&mut self, delta: &KpiRecord) {
        self.energy_compute += delta.energy_compute;
        self.energy_comm += delta.energy_comm;
        self.latency += delta.latency;
        self.comm_bits += delta.comm_bits;
        self.comm_seconds += delta.comm_seconds;
        self.compute_flops += delta.compute_flops;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(x: f64, y: f64, r: f64) -> MeasurementNode {
        MeasurementNode {
            id: "n".into(),
            kind: NodeKind::BaseStation,
            position: Position::new(x, y),
            coverage_radius: r,
            quality_indicator: 1.0,
            consent: true,
            authorized: true,
            uplink_bw: 1e6,
            downlink_bw: 1e6,
        }
    }

    fn area(x: f64, y: f64, r: f64) -> SensingArea {
        SensingArea { center: Position::new(x, y), radius: r }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(Position::new(0.0, 0.0), Position::new(3.0, 4.0)), 5.0);
        assert_eq!(distance(Position::new(5.0, 5.0), Position::new(5.0, 5.0)), 0.0);
        assert_eq!(distance(Position::new(0.0, 0.0), Position::new(10.0, 0.0)), 10.0);
    }

    #[test]
    fn covers_examples() {
        assert!(covers(&node(0.0, 0.0, 100.0), &area(50.0, 0.0, 20.0)));
        assert!(!covers(&node(0.0, 0.0, 100.0), &area(90.0, 0.0, 20.0)));
        assert!(covers(&node(0.0, 0.0, 100.0), &area(80.0, 0.0, 20.0)));
    }

    #[test]
    fn base_station_must_consent() {
        let mut bs = node(0.0, 0.0, 10.0);
        bs.consent = false;
        assert!(matches!(bs.validate(), Err(ModelError::BaseStationConsent(_))));
        bs.kind = NodeKind::UserEquipment;
        assert!(bs.validate().is_ok());
    }

    #[test]
    fn node_validation_rejects_bad_ranges() {
        let mut n = node(0.0, 0.0, 0.0);
        assert!(matches!(n.validate(), Err(ModelError::NotPositive { what: "coverage_radius", .. })));
        n.coverage_radius = 1.0;
        n.quality_indicator = 1.5;
        assert!(matches!(n.validate(), Err(ModelError::OutOfUnitRange { .. })));
        n.quality_indicator = 0.5;
        n.position.x = f64::NAN;
        assert!(matches!(n.validate(), Err(ModelError::NotFinite { .. })));
    }

    #[test]
    fn requested_rounds_is_rate_times_duration() {
        let req = SensingRequest {
            request_id: "r".into(),
            consumer_id: "c".into(),
            area: area(0.0, 0.0, 1.0),
            mode: SensingMode::Bistatic,
            refresh_rate: 2.0,
            duration: 3.0,
            min_quality: 0.0,
        };
        assert_eq!(req.requested_rounds(), 6);
        let req = SensingRequest { refresh_rate: 0.1, duration: 30.0, ..req };
        assert_eq!(req.requested_rounds(), 3);
    }

    #[test]
    fn kpi_energy_is_sum_of_components() {
        let mut rec = KpiRecord::new("s");
        rec.add(&KpiRecord { energy_compute: 1.5, energy_comm: 0.25, ..KpiRecord::new("s") });
        rec.add(&KpiRecord { energy_compute: 0.5, energy_comm: 0.75, ..KpiRecord::new("s") });
        assert_eq!(rec.energy(), rec.energy_compute + rec.energy_comm);
        assert_eq!(rec.energy(), 3.0);
    }

    fn coord() -> impl Strategy<Value = f64> {
        -1e4..1e4f64
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(ax in coord(), ay in coord(), bx in coord(), by in coord(), cx in coord(), cy in coord()) {
            let (a, b, c) = (Position::new(ax, ay), Position::new(bx, by), Position::new(cx, cy));
            prop_assert!(distance(a, b) >= 0.0);
            prop_assert_eq!(distance(a, b), distance(b, a));
            prop_assert!(distance(a, c) <= distance(a, b) + distance(b, c) + 1e-9);
        }

        #[test]
        fn covers_is_monotone_in_radius(dx in coord(), r in 1.0..1e4f64, cover in 1.0..2e4f64, extra in 0.0..1e4f64) {
            let a = area(dx, 0.0, r);
            if covers(&node(0.0, 0.0, cover), &a) {
                prop_assert!(covers(&node(0.0, 0.0, cover + extra), &a));
            }
        }
    }
}
