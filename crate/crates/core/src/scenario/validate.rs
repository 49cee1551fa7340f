use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use serde::Serialize;
use serde_json::Value;

use crate::model::NodeKind;
use crate::protocol::nf;

use super::Scenario;

pub const SCHEMA: &str = include_str!("../../schemas/scenario.schema.json");

static VALIDATOR: LazyLock<jsonschema::Validator> = LazyLock::new(|| {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is JSON");
    jsonschema::validator_for(&schema).expect("bundled schema compiles")
});

/// One problem with a scenario: where (JSON pointer), which rule, and a
/// human-readable explanation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, rule: &str, message: impl Into<String>) -> Self {
        Self { path: path.into(), rule: rule.to_owned(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: [{}] {}", self.rule, self.message)
    }
}

/// Parses `text` and returns every violation; empty means valid.
pub fn validate(text: &str) -> Result<Vec<Violation>, serde_json::Error> {
    let value: Value = serde_json::from_str(text)?;
    Ok(validate_value(&value))
}

/// Structural check against the schema first; the cross-reference checks
/// only run on structurally valid input.
pub fn validate_value(value: &Value) -> Vec<Violation> {
    let mut out: Vec<Violation> = VALIDATOR
        .iter_errors(value)
        .map(|e| Violation::new(e.instance_path().as_str(), e.kind().keyword(), e.to_string()))
        .collect();
    if !out.is_empty() {
        out.sort();
        out.dedup();
        return out;
    }
    match serde_json::from_value::<Scenario>(value.clone()) {
        Ok(s) => semantic(&s),
        Err(e) => vec![Violation::new("", "type", e.to_string())],
    }
}

fn semantic(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut node_paths: BTreeMap<&str, String> = BTreeMap::new();
    let node_ids = s
        .measurement_nodes
        .iter()
        .enumerate()
        .map(|(i, m)| (m.node.id.as_str(), format!("/measurement_nodes/{i}/id")))
        .chain(
            s.compute_nodes
                .iter()
                .enumerate()
                .map(|(i, c)| (c.node_id.as_str(), format!("/compute_nodes/{i}/node_id"))),
        )
        .chain(s.routing_nodes.iter().enumerate().map(|(i, r)| (r.id.as_str(), format!("/routing_nodes/{i}/id"))))
        .chain(s.consumers.iter().enumerate().map(|(i, c)| (c.id.as_str(), format!("/consumers/{i}/id"))));
    for (id, path) in node_ids {
        if nf::RESERVED.contains(&id) {
            out.push(Violation::new(&path, "reserved", format!("`{id}` is the id of a network function")));
        }
        if let Some(first) = node_paths.get(id) {
            out.push(Violation::new(&path, "unique", format!("node id `{id}` already defined at {first}")));
        } else {
            node_paths.insert(id, path);
        }
    }

    let cells = unique(&mut out, s.cells.iter().enumerate().map(|(i, c)| (c.id.as_str(), format!("/cells/{i}/id"))));
    let targets =
        unique(&mut out, s.targets.iter().enumerate().map(|(i, t)| (t.id.as_str(), format!("/targets/{i}/id"))));
    let sessions = s
        .sensing_requests
        .iter()
        .enumerate()
        .map(|(i, r)| (r.request.request_id.as_str(), format!("/sensing_requests/{i}/request_id")))
        .chain(
            s.workloads
                .iter()
                .enumerate()
                .map(|(i, w)| (w.workload.workload_id.as_str(), format!("/workloads/{i}/workload_id"))),
        );
    unique(&mut out, sessions);

    let measurement: BTreeSet<&str> = s.measurement_nodes.iter().map(|m| m.node.id.as_str()).collect();
    let compute: BTreeSet<&str> = s.compute_nodes.iter().map(|c| c.node_id.as_str()).collect();
    let routing: BTreeSet<&str> = s.routing_nodes.iter().map(|r| r.id.as_str()).collect();
    let consumers: BTreeSet<&str> = s.consumers.iter().map(|c| c.id.as_str()).collect();
    let mut reference = |path: String, id: &str, set: &BTreeSet<&str>, what: &str| {
        if !set.contains(id) {
            out.push(Violation::new(path, "reference", format!("unknown {what} `{id}`")));
        }
    };

    for (i, m) in s.measurement_nodes.iter().enumerate() {
        if let Some(cell) = &m.cell {
            reference(format!("/measurement_nodes/{i}/cell"), cell, &cells, "cell");
        }
    }
    for (i, r) in s.sensing_requests.iter().enumerate() {
        reference(format!("/sensing_requests/{i}/consumer_id"), r.request.consumer_id.as_str(), &consumers, "consumer");
        reference(format!("/sensing_requests/{i}/target"), &r.target, &targets, "target");
        if let Some(c) = &r.cell {
            reference(format!("/sensing_requests/{i}/cell"), c, &cells, "cell");
        }
    }
    for (i, w) in s.workloads.iter().enumerate() {
        reference(format!("/workloads/{i}/offloader"), w.offloader.as_str(), &measurement, "measurement node");
        if let Some(r) = &w.route_via {
            reference(format!("/workloads/{i}/route_via"), r.as_str(), &routing, "routing node");
        }
    }
    for (i, f) in s.faults.iter().enumerate() {
        reference(format!("/faults/{i}/node"), f.node.as_str(), &compute, "compute node");
    }

    for (i, m) in s.measurement_nodes.iter().enumerate() {
        if m.node.kind == NodeKind::BaseStation && !m.node.consent {
            out.push(Violation::new(
                format!("/measurement_nodes/{i}/consent"),
                "consent",
                "base stations always take part; consent must be true",
            ));
        }
    }
    out.sort();
    out
}

fn unique<'a>(out: &mut Vec<Violation>, items: impl Iterator<Item = (&'a str, String)>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    for (id, path) in items {
        if !seen.insert(id) {
            out.push(Violation::new(path, "unique", format!("`{id}` is defined more than once")));
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "seed": 1,
            "duration": 1.0,
            "channels": {
                "control": { "fixed_latency": 0.001, "bandwidth": 1e6 },
                "data": { "fixed_latency": 0.0, "bandwidth": 1e7 }
            },
            "measurement_nodes": [{
                "id": "ue-1", "kind": "user_equipment", "position": { "x": 0.0, "y": 0.0 },
                "coverage_radius": 100.0, "quality_indicator": 1.0, "consent": true,
                "authorized": true, "uplink_bw": 1e6, "downlink_bw": 1e6
            }],
            "consumers": [{ "id": "app", "authorized": true }],
            "workloads": [{
                "workload_id": "w", "traffic_class": "one_time_one_node", "flops": 1e9, "memory": 1e6,
                "payload_bits": 1e6, "result_bits": 1e5, "precision": "fp32",
                "qos": { "class": "precision_sensitive" }, "offloader": "ue-1", "arrival": 0.0
            }]
        })
    }

    #[test]
    fn minimal_scenario_is_valid() {
        assert_eq!(validate_value(&minimal()), vec![]);
    }

    #[test]
    fn unknown_reference_names_its_path() {
        let mut v = minimal();
        v["workloads"][0]["offloader"] = json!("ghost");
        let out = validate_value(&v);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].path, "/workloads/0/offloader");
        assert_eq!(out[0].rule, "reference");
    }

    #[test]
    fn non_positive_value_violates_schema() {
        let mut v = minimal();
        v["duration"] = json!(-1.0);
        let out = validate_value(&v);
        assert_eq!(out[0].path, "/duration");
        assert_eq!(out[0].rule, "exclusiveMinimum");
    }

    #[test]
    fn duplicate_and_reserved_ids() {
        let mut v = minimal();
        v["consumers"] = json!([{ "id": "ue-1", "authorized": true }, { "id": "semf", "authorized": true }]);
        let rules: Vec<_> = validate_value(&v).into_iter().map(|x| (x.path, x.rule)).collect();
        assert!(rules.contains(&("/consumers/0/id".into(), "unique".into())));
        assert!(rules.contains(&("/consumers/1/id".into(), "reserved".into())));
    }

    #[test]
    fn base_station_must_consent() {
        let mut v = minimal();
        v["measurement_nodes"][0]["kind"] = json!("base_station");
        v["measurement_nodes"][0]["consent"] = json!(false);
        let out = validate_value(&v);
        assert_eq!(out[0].rule, "consent");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut v = minimal();
        v["colour"] = json!("red");
        assert_eq!(validate_value(&v)[0].rule, "additionalProperties");
    }
}
