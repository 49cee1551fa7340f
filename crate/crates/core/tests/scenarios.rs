use std::path::PathBuf;

use bcsim::kpi::{CsvRow, KpiReport, Outcome, SessionKind};
use bcsim::model::QosClass;
use bcsim::offload::{estimate_energy, estimate_latency, Policy};
use bcsim::scenario::{compare, render_table, run, validate, Scenario, ScenarioError};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(format!("{name}.json"))
}

fn load(name: &str) -> Scenario {
    Scenario::load(&fixture(name)).unwrap()
}

#[test]
fn fixtures_validate_clean() {
    for name in ["basic", "compare", "fault", "single_node"] {
        let text = std::fs::read_to_string(fixture(name)).unwrap();
        assert_eq!(validate(&text).unwrap(), vec![], "{name}");
    }
}

#[test]
fn invalid_scenario_lists_violations() {
    let text = std::fs::read_to_string(fixture("basic")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["workloads"][0]["offloader"] = "nobody".into();
    v["faults"] = serde_json::json!([{ "at": 1.0, "node": "ue-1", "kind": "node_failure" }]);
    match Scenario::from_json(&v.to_string()) {
        Err(ScenarioError::Invalid(violations)) => {
            let paths: Vec<_> = violations.iter().map(|x| x.path.as_str()).collect();
            assert!(paths.contains(&"/workloads/0/offloader"), "{paths:?}");
            assert!(paths.contains(&"/faults/0/node"), "{paths:?}");
        }
        other => panic!("expected violations, got {other:?}"),
    }
}

#[test]
fn rejected_sessions_are_reported_not_raised() {
    let out = run(&load("basic")).unwrap();
    let r = &out.report;
    for id in ["s-rogue", "s-uncovered"] {
        let s = r.session(id).unwrap();
        assert_eq!(s.outcome, Outcome::Rejected, "{id}");
        assert!(s.detail.is_some());
    }
    assert_eq!(r.session("w-deadline").unwrap().outcome, Outcome::Failed);
    for id in ["s-main", "s-mono", "w-single", "w-routed", "w-multi", "w-iter"] {
        assert_eq!(r.session(id).unwrap().outcome, Outcome::Completed, "{id}");
    }
    assert_eq!(r.aggregates.sessions, r.sessions.len());
}

#[test]
fn routed_offload_records_its_router() {
    let out = run(&load("basic")).unwrap();
    let single = out.report.session("w-single").unwrap().record.latency;
    let routed = out.report.session("w-routed").unwrap().record.latency;
    assert!(single > 0.0 && routed > 0.0);
    let routed_session = out.offload.iter().find(|s| s.id() == "w-routed").unwrap();
    assert_eq!(routed_session.route_via.as_ref().map(|r| r.id.as_str()), Some("rt-1"));
}

#[test]
fn min_latency_beats_min_energy_on_mean_latency() {
    let scenario = load("compare");
    let results = compare(&scenario, &Policy::ALL).unwrap();
    let rows: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    let (lat, en) = (&rows[0], &rows[1]);
    assert_eq!(lat.policy, Policy::MinLatency.name());
    assert!(lat.mean_latency.unwrap() <= en.mean_latency.unwrap(), "{}", render_table(&rows));
    assert!(en.total_energy <= lat.total_energy, "{}", render_table(&rows));

    // Every placement is the per-workload argmin over the fixture's nodes.
    for ((_, out), policy) in results.iter().zip(Policy::ALL) {
        for spec in &scenario.workloads {
            let w = &spec.workload;
            let mut best: Option<(f64, &str)> = None;
            for cap in &scenario.compute_nodes {
                if cap.memory_bytes < w.memory || !cap.supported_precisions.contains(&w.precision) {
                    continue;
                }
                let Ok(latency) = estimate_latency(w, cap) else { continue };
                if matches!(w.qos, QosClass::LatencySensitive { deadline } if latency > deadline) {
                    continue;
                }
                let cost = match policy {
                    Policy::MinLatency => latency,
                    Policy::MinEnergy => estimate_energy(w, cap),
                };
                if best.is_none_or(|(c, id)| cost < c || (cost == c && cap.node_id.as_str() < id)) {
                    best = Some((cost, cap.node_id.as_str()));
                }
            }
            let session = out.offload.iter().find(|s| s.id() == w.workload_id.as_str()).unwrap();
            assert_eq!(session.chosen_node_ids[0].as_str(), best.unwrap().1, "{} under {policy:?}", w.workload_id);
        }
    }
}

#[test]
fn single_node_makes_policies_identical() {
    let results = compare(&load("single_node"), &Policy::ALL).unwrap();
    assert_eq!(results.len(), Policy::ALL.len());
    let (a, b) = (&results[0].0, &results[1].0);
    assert_eq!(a.offload_completed, 5);
    assert_eq!(a.mean_latency, b.mean_latency);
    assert_eq!(a.p95_latency, b.p95_latency);
    assert_eq!(a.total_energy, b.total_energy);
    assert_eq!(
        results[0].1.trace_jsonl().replace("min_latency", ""),
        results[1].1.trace_jsonl().replace("min_energy", "")
    );
}

#[test]
fn compare_needs_two_policies() {
    assert!(compare(&load("single_node"), &[Policy::MinLatency]).is_err());
}

#[test]
fn exported_csv_agrees_with_aggregates() {
    let out = run(&load("compare")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("sessions.csv")).unwrap();
    let rows: Vec<CsvRow> = reader.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), out.report.sessions.len());
    let done: Vec<f64> = rows
        .iter()
        .filter(|r| r.kind == SessionKind::Offload && r.outcome == Outcome::Completed)
        .map(|r| r.latency)
        .collect();
    let mean = done.iter().sum::<f64>() / done.len() as f64;
    let reported = out.report.aggregates.offload_latency.mean.unwrap();
    assert!((mean - reported).abs() <= 1e-12 * reported, "{mean} vs {reported}");
    let energy: f64 = rows.iter().map(|r| r.energy).sum();
    assert!((energy - out.report.aggregates.total_energy).abs() <= 1e-12 * energy.max(1.0));

    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: KpiReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn empty_scenario_runs() {
    let s = Scenario::from_json(
        r#"{"seed": 3, "duration": 1.0,
            "channels": {"control": {"fixed_latency": 0.001, "bandwidth": 1e6},
                         "data": {"fixed_latency": 0.0, "bandwidth": 1e7}}}"#,
    )
    .unwrap();
    let out = run(&s).unwrap();
    assert_eq!(out.report.aggregates.sessions, 0);
    assert_eq!(out.report.aggregates.offload_latency.mean, None);
    let csv = String::from_utf8(out.report.sessions_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn seed_changes_noise_not_structure() {
    let a = load("basic");
    let b = Scenario { seed: a.seed + 1, ..a.clone() };
    let (ra, rb) = (run(&a).unwrap().report, run(&b).unwrap().report);
    assert_eq!(ra.sessions.len(), rb.sessions.len());
    let ea = ra.session("s-main").unwrap().position_error;
    let eb = rb.session("s-main").unwrap().position_error;
    assert_ne!(ea, eb);
    assert_eq!(ra.session("w-single").unwrap().record.latency, rb.session("w-single").unwrap().record.latency);
}

#[test]
fn reports_of_different_seeds_merge() {
    let a = load("basic");
    let b = Scenario { seed: 99, ..a.clone() };
    let (ra, rb) = (run(&a).unwrap().report, run(&b).unwrap().report);
    let merged = ra.merge(&rb).unwrap();
    assert_eq!(merged, rb.merge(&ra).unwrap());
    assert_eq!(merged.sessions.len(), ra.sessions.len() + rb.sessions.len());
    assert!(ra.merge(&ra).is_err());
}
