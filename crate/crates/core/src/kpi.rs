//! KPI accumulation, per-run aggregates and report export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::KpiRecord;

pub const SCHEMA_VERSION: &str = "bcsim.report/v1";
pub const REPORT_FILE: &str = "report.json";
pub const SESSIONS_FILE: &str = "sessions.csv";

#[derive(Debug, Error)]
pub enum KpiError {
    #[error("negative {field} delta for {subject}")]
    NegativeDelta { subject: String, field: &'static str },
    #[error("session {id} (seed {seed}) appears in both reports")]
    DuplicateSession { seed: u64, id: String },
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("writing sessions table: {0}")]
    Csv(#[from] csv::Error),
}

/// Running totals per subject. Deltas are additive and never negative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KpiAccumulator {
    totals: BTreeMap<String, KpiRecord>,
}

impl KpiAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, subject_id: &str, delta: &KpiRecord) -> Result<(), KpiError> {
        if let Some((field, _)) = delta.fields().into_iter().find(|(_, v)| *v < 0.0) {
            return Err(KpiError::NegativeDelta { subject: subject_id.to_owned(), field });
        }
        self.totals.entry(subject_id.to_owned()).or_insert_with(|| KpiRecord::new(subject_id)).add(delta);
        Ok(())
    }

    pub fn get(&self, subject_id: &str) -> Option<&KpiRecord> {
        self.totals.get(subject_id)
    }

    pub fn merge(&mut self, other: &KpiAccumulator) {
        for (subject, rec) in &other.totals {
            self.totals.entry(subject.clone()).or_insert_with(|| KpiRecord::new(subject.as_str())).add(rec);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &KpiRecord)> {
        self.totals.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    Sensing,
    Offload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Rejected,
    Failed,
    /// Still running when the simulation horizon was reached.
    Incomplete,
}

/// One exported row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub seed: u64,
    pub session_id: String,
    pub kind: SessionKind,
    pub outcome: Outcome,
    #[serde(flatten)]
    pub record: KpiRecord,
    pub energy: f64,
    pub attempts: u32,
    pub rounds_requested: u32,
    pub rounds_delivered: u32,
    pub position_error: Option<f64>,
    /// Free-form reason for rejected or failed sessions.
    pub detail: Option<String>,
}

impl SessionReport {
    pub fn new(
        seed: u64,
        session_id: impl Into<String>,
        kind: SessionKind,
        outcome: Outcome,
        record: KpiRecord,
    ) -> Self {
        Self {
            seed,
            session_id: session_id.into(),
            kind,
            outcome,
            energy: record.energy(),
            record,
            attempts: 0,
            rounds_requested: 0,
            rounds_delivered: 0,
            position_error: None,
            detail: None,
        }
    }
}

/// Delivered over requested result rounds.
pub fn refresh_attainment(session: &SessionReport) -> f64 {
    if session.rounds_requested == 0 {
        return 0.0;
    }
    (session.rounds_delivered as f64 / session.rounds_requested as f64).min(1.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
}

impl LatencyStats {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            count: sorted.len(),
            mean: Some(sorted.iter().sum::<f64>() / sorted.len() as f64),
            median: Some(median_sorted(&sorted)),
            p95: Some(nearest_rank(&sorted, 0.95)),
        }
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median of arbitrary values; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(median_sorted(&sorted))
}

/// Smallest value with at least `q` of the sample at or below it.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sessions: usize,
    pub completed: usize,
    pub rejected: usize,
    pub failed: usize,
    pub incomplete: usize,
    pub offload_latency: LatencyStats,
    pub sensing_latency: LatencyStats,
    pub total_energy: f64,
    pub total_energy_compute: f64,
    pub total_energy_comm: f64,
    pub total_comm_bits: f64,
    pub total_comm_seconds: f64,
    pub total_compute_flops: f64,
    pub sensing_rmse: Option<f64>,
    pub refresh_attainment: Option<f64>,
}

impl Aggregates {
    /// Everything here is a function of `sessions` alone.
    pub fn compute(sessions: &[SessionReport]) -> Self {
        let count = |o: Outcome| sessions.iter().filter(|s| s.outcome == o).count();
        let latencies = |kind: SessionKind| -> Vec<f64> {
            sessions
                .iter()
                .filter(|s| s.kind == kind && s.outcome == Outcome::Completed)
                .map(|s| s.record.latency)
                .collect()
        };
        let completed_sensing: Vec<&SessionReport> =
            sessions.iter().filter(|s| s.kind == SessionKind::Sensing && s.outcome == Outcome::Completed).collect();
        let errors: Vec<f64> = completed_sensing.iter().filter_map(|s| s.position_error).collect();
        let sum = |f: fn(&KpiRecord) -> f64| sessions.iter().map(|s| f(&s.record)).sum::<f64>();
        let total_energy_compute = sum(|r| r.energy_compute);
        let total_energy_comm = sum(|r| r.energy_comm);
        Self {
            sessions: sessions.len(),
            completed: count(Outcome::Completed),
            rejected: count(Outcome::Rejected),
            failed: count(Outcome::Failed),
            incomplete: count(Outcome::Incomplete),
            offload_latency: LatencyStats::from_values(&latencies(SessionKind::Offload)),
            sensing_latency: LatencyStats::from_values(&latencies(SessionKind::Sensing)),
            total_energy: total_energy_compute + total_energy_comm,
            total_energy_compute,
            total_energy_comm,
            total_comm_bits: sum(|r| r.comm_bits),
            total_comm_seconds: sum(|r| r.comm_seconds),
            total_compute_flops: sum(|r| r.compute_flops),
            sensing_rmse: (!errors.is_empty())
                .then(|| (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()),
            refresh_attainment: (!completed_sensing.is_empty()).then(|| {
                completed_sensing.iter().map(|s| refresh_attainment(s)).sum::<f64>() / completed_sensing.len() as f64
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiReport {
    pub schema_version: String,
    pub runs: Vec<RunInfo>,
    pub aggregates: Aggregates,
    pub sessions: Vec<SessionReport>,
}

impl KpiReport {
    pub fn from_sessions(run: RunInfo, mut sessions: Vec<SessionReport>) -> Self {
        sessions.sort_by(|a, b| (a.seed, &a.session_id).cmp(&(b.seed, &b.session_id)));
        Self {
            schema_version: SCHEMA_VERSION.to_owned(),
            runs: vec![run],
            aggregates: Aggregates::compute(&sessions),
            sessions,
        }
    }

    pub fn session(&self, id: &str) -> Option<&SessionReport> {
        self.sessions.iter().find(|s| s.session_id == id)
    }

    /// Combines reports of separate runs, typically the same scenario under
    /// different seeds. Order of merging does not matter.
    pub fn merge(&self, other: &KpiReport) -> Result<KpiReport, KpiError> {
        let keys: BTreeSet<(u64, &str)> = self.sessions.iter().map(|s| (s.seed, s.session_id.as_str())).collect();
        if let Some(dup) = other.sessions.iter().find(|s| keys.contains(&(s.seed, s.session_id.as_str()))) {
            return Err(KpiError::DuplicateSession { seed: dup.seed, id: dup.session_id.clone() });
        }
        let mut sessions = self.sessions.clone();
        sessions.extend(other.sessions.iter().cloned());
        sessions.sort_by(|a, b| (a.seed, &a.session_id).cmp(&(b.seed, &b.session_id)));
        let runs: BTreeSet<RunInfo> = self.runs.iter().chain(&other.runs).cloned().collect();
        Ok(KpiReport {
            schema_version: SCHEMA_VERSION.to_owned(),
            runs: runs.into_iter().collect(),
            aggregates: Aggregates::compute(&sessions),
            sessions,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is always serializable");
        s.push('\n');
        s
    }

    pub fn sessions_csv(&self) -> Result<Vec<u8>, KpiError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.sessions {
            w.serialize(CsvRow::from(s))?;
        }
        if self.sessions.is_empty() {
            w.write_record(CsvRow::HEADER)?;
        }
        w.into_inner().map_err(|e| KpiError::Csv(e.into_error().into()))
    }

    /// Writes `report.json` and `sessions.csv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), KpiError> {
        write(&dir.join(REPORT_FILE), self.to_json().as_bytes())?;
        write(&dir.join(SESSIONS_FILE), &self.sessions_csv()?)
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<(), KpiError> {
    fs::write(path, bytes).map_err(|source| KpiError::Io { path: path.display().to_string(), source })
}

/// Flat table row. `flatten` does not mix with the csv writer, so the
/// record fields are spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub seed: u64,
    pub session_id: String,
    pub kind: SessionKind,
    pub outcome: Outcome,
    pub latency: f64,
    pub energy: f64,
    pub energy_compute: f64,
    pub energy_comm: f64,
    pub comm_bits: f64,
    pub comm_seconds: f64,
    pub compute_flops: f64,
    pub attempts: u32,
    pub rounds_requested: u32,
    pub rounds_delivered: u32,
    pub position_error: Option<f64>,
}

impl CsvRow {
    pub const HEADER: [&'static str; 15] = [
        "seed",
        "session_id",
        "kind",
        "outcome",
        "latency",
        "energy",
        "energy_compute",
        "energy_comm",
        "comm_bits",
        "comm_seconds",
        "compute_flops",
        "attempts",
        "rounds_requested",
        "rounds_delivered",
        "position_error",
    ];
}

impl From<&SessionReport> for CsvRow {
    fn from(s: &SessionReport) -> Self {
        Self {
            seed: s.seed,
            session_id: s.session_id.clone(),
            kind: s.kind,
            outcome: s.outcome,
            latency: s.record.latency,
            energy: s.energy,
            energy_compute: s.record.energy_compute,
            energy_comm: s.record.energy_comm,
            comm_bits: s.record.comm_bits,
            comm_seconds: s.record.comm_seconds,
            compute_flops: s.record.compute_flops,
            attempts: s.attempts,
            rounds_requested: s.rounds_requested,
            rounds_delivered: s.rounds_delivered,
            position_error: s.position_error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joules(j: f64) -> KpiRecord {
        KpiRecord { energy_compute: j, ..KpiRecord::new("x") }
    }

    fn offload(id: &str, latency: f64) -> SessionReport {
        let rec = KpiRecord { latency, energy_comm: 0.5, energy_compute: 1.0, ..KpiRecord::new(id) };
        SessionReport::new(1, id, SessionKind::Offload, Outcome::Completed, rec)
    }

    fn sensing(id: &str, requested: u32, delivered: u32) -> SessionReport {
        let mut s = SessionReport::new(1, id, SessionKind::Sensing, Outcome::Completed, KpiRecord::new(id));
        s.rounds_requested = requested;
        s.rounds_delivered = delivered;
        s
    }

    #[test]
    fn deltas_accumulate() {
        let mut acc = KpiAccumulator::new();
        acc.record("s", &joules(1.0)).unwrap();
        acc.record("s", &joules(1.0)).unwrap();
        assert_eq!(acc.get("s").unwrap().energy(), 2.0);
        acc.record("s", &KpiRecord::new("s")).unwrap();
        assert_eq!(acc.get("s").unwrap().energy(), 2.0);
    }

    #[test]
    fn negative_delta_is_rejected_without_effect() {
        let mut acc = KpiAccumulator::new();
        acc.record("s", &joules(1.0)).unwrap();
        let err = acc.record("s", &joules(-1.0)).unwrap_err();
        assert!(matches!(err, KpiError::NegativeDelta { field: "energy_compute", .. }));
        assert_eq!(acc.get("s").unwrap().energy(), 1.0);
    }

    #[test]
    fn accumulator_merge_is_additive() {
        let mut a = KpiAccumulator::new();
        a.record("s", &joules(1.0)).unwrap();
        let mut b = KpiAccumulator::new();
        b.record("s", &joules(2.0)).unwrap();
        b.record("t", &joules(4.0)).unwrap();
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.get("s").unwrap().energy(), 3.0);
    }

    #[test]
    fn attainment_ratio() {
        assert_eq!(refresh_attainment(&sensing("a", 6, 6)), 1.0);
        assert_eq!(refresh_attainment(&sensing("a", 6, 3)), 0.5);
        assert_eq!(refresh_attainment(&sensing("a", 6, 0)), 0.0);
    }

    #[test]
    fn p95_is_nearest_rank() {
        let values: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&values, 0.95), 19.0);
        assert_eq!(nearest_rank(&[3.0], 0.95), 3.0);
        let stats = LatencyStats::from_values(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(stats.median, Some(2.5));
        assert_eq!(stats.p95, Some(4.0));
        assert_eq!(stats.mean, Some(2.5));
    }

    #[test]
    fn total_energy_decomposes() {
        let report = KpiReport::from_sessions(
            RunInfo { seed: 1, policy: "min_latency".into() },
            vec![offload("a", 0.1), offload("b", 0.3), sensing("c", 2, 2)],
        );
        let agg = &report.aggregates;
        assert_eq!(agg.total_energy, agg.total_energy_compute + agg.total_energy_comm);
        assert_eq!(agg.total_energy, 3.0);
        assert_eq!(agg.offload_latency.count, 2);
        assert_eq!(agg.refresh_attainment, Some(1.0));
    }

    #[test]
    fn empty_report_is_valid() {
        let report = KpiReport::from_sessions(RunInfo { seed: 0, policy: "min_energy".into() }, vec![]);
        let back: KpiReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        let csv = String::from_utf8(report.sessions_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("seed,session_id,kind"));
    }

    #[test]
    fn merge_is_order_independent_and_rejects_duplicates() {
        let a = KpiReport::from_sessions(RunInfo { seed: 1, policy: "p".into() }, vec![offload("a", 0.1)]);
        let mut second = offload("a", 0.2);
        second.seed = 2;
        let b = KpiReport::from_sessions(RunInfo { seed: 2, policy: "p".into() }, vec![second]);
        assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        assert_eq!(a.merge(&b).unwrap().aggregates.offload_latency.count, 2);
        assert!(matches!(a.merge(&a), Err(KpiError::DuplicateSession { .. })));
    }

    #[test]
    fn csv_header_matches_row_fields() {
        let report = KpiReport::from_sessions(RunInfo { seed: 1, policy: "p".into() }, vec![offload("a", 0.1)]);
        let csv = String::from_utf8(report.sessions_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CsvRow::HEADER.join(","));
    }
}
