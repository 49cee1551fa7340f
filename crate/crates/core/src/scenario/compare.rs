use std::fmt::Write as _;

use serde::Serialize;

use crate::offload::Policy;

use super::runner::{run, RunError, RunOutput};
use super::Scenario;

/// Side-by-side aggregates of one policy run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub offload_completed: usize,
    pub mean_latency: Option<f64>,
    pub median_latency: Option<f64>,
    pub p95_latency: Option<f64>,
    pub total_energy: f64,
    pub compute_energy: f64,
    pub comm_energy: f64,
    pub sensing_rmse: Option<f64>,
    pub refresh_attainment: Option<f64>,
}

impl ComparisonRow {
    fn from_run(policy: Policy, out: &RunOutput) -> Self {
        let a = &out.report.aggregates;
        Self {
            policy: policy.name().to_owned(),
            offload_completed: a.offload_latency.count,
            mean_latency: a.offload_latency.mean,
            median_latency: a.offload_latency.median,
            p95_latency: a.offload_latency.p95,
            total_energy: a.total_energy,
            compute_energy: a.total_energy_compute,
            comm_energy: a.total_energy_comm,
            sensing_rmse: a.sensing_rmse,
            refresh_attainment: a.refresh_attainment,
        }
    }
}

/// Runs the scenario once per policy, concurrently, with everything but
/// the policy held fixed. Results come back in `policies` order.
pub fn compare(scenario: &Scenario, policies: &[Policy]) -> Result<Vec<(ComparisonRow, RunOutput)>, RunError> {
    if policies.len() < 2 {
        return Err(RunError::TooFewPolicies(policies.len()));
    }
    let results: Vec<Result<RunOutput, RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&policy| {
                let scenario = Scenario { policy, ..scenario.clone() };
                scope.spawn(move || run(&scenario))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("policy run panicked")).collect()
    });
    policies.iter().zip(results).map(|(&p, r)| r.map(|out| (ComparisonRow::from_run(p, &out), out))).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.6}"))
}

/// Plain-text table, one row per policy.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>9} {:>12} {:>12} {:>12} {:>14} {:>12}",
        "policy", "completed", "mean_lat_s", "median_lat_s", "p95_lat_s", "energy_J", "rmse_m"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>12} {:>12} {:>12} {:>14.6} {:>12}",
            r.policy,
            r.offload_completed,
            cell(r.mean_latency),
            cell(r.median_latency),
            cell(r.p95_latency),
            r.total_energy,
            cell(r.sensing_rmse)
        );
    }
    s
}
