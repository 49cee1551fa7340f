use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bcsim::engine::{Plane, TraceRecord};
use bcsim::offload::Policy;
use bcsim::scenario::{self, render_table, RunOutput, Scenario, ScenarioError};
use clap::{Args, Parser, Subcommand};

/// Exit status for unreadable or invalid input.
const EXIT_INVALID: u8 = 2;
/// Exit status for failures while simulating or writing results.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "bcsim", version, about = "Discrete-event simulator for network sensing and compute offloading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate { scenario: PathBuf },
    /// Run one scenario and write trace.jsonl, report.json and sessions.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Placement policy, overriding the scenario's.
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Run the scenario once per policy and print a side-by-side table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Policies to compare (comma separated). Defaults to all.
        #[arg(long = "policy", value_delimiter = ',')]
        policies: Vec<Policy>,
    },
    /// Print a trace file in readable form.
    TraceDump {
        trace: PathBuf,
        /// Only records whose event kind matches.
        #[arg(long)]
        kind: Option<String>,
        /// Only events on this plane (control or data).
        #[arg(long, value_parser = parse_plane)]
        plane: Option<Plane>,
        /// Only events sent or received by this node.
        #[arg(long)]
        node: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Scheduler allocation interval in seconds.
    #[arg(long)]
    ticks: Option<f64>,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn parse_plane(s: &str) -> Result<Plane, String> {
    match s.to_ascii_lowercase().as_str() {
        "control" | "cp" => Ok(Plane::Control),
        "data" | "dp" => Ok(Plane::Data),
        _ => Err(format!("unknown plane `{s}` (expected control or data)")),
    }
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut s = Scenario::load(&common.scenario)?;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(t) = common.ticks {
        if !(t.is_finite() && t > 0.0) {
            return Err(Failure::Invalid(format!("--ticks must be a positive number, got {t}")));
        }
        s.allocation_tick = t;
    }
    Ok(s)
}

fn write(out: &RunOutput, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    out.write(dir).map_err(|e| Failure::Runtime(e.to_string()))
}

fn validate(path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("reading {}: {e}", path.display())))?;
    let violations = scenario::validate(&text).map_err(|e| Failure::Invalid(format!("parsing scenario: {e}")))?;
    if violations.is_empty() {
        println!("{}: ok", path.display());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(Failure::Invalid(format!("{} violation(s)", violations.len())))
}

fn run(common: &Common, policy: Option<Policy>) -> Result<(), Failure> {
    let mut s = load(common)?;
    if let Some(p) = policy {
        s.policy = p;
    }
    let out = scenario::run(&s).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&out, &common.out)?;
    let a = &out.report.aggregates;
    println!(
        "seed {} policy {}: {} sessions, {} completed, {} rejected, {} failed, {} incomplete",
        s.seed,
        s.policy.name(),
        a.sessions,
        a.completed,
        a.rejected,
        a.failed,
        a.incomplete
    );
    println!("wrote {}", common.out.display());
    Ok(())
}

fn compare(common: &Common, policies: &[Policy]) -> Result<(), Failure> {
    let s = load(common)?;
    let policies = if policies.is_empty() { Policy::ALL.to_vec() } else { policies.to_vec() };
    let results = scenario::compare(&s, &policies).map_err(|e| match e {
        scenario::RunError::TooFewPolicies(_) => Failure::Invalid(e.to_string()),
        e => Failure::Runtime(e.to_string()),
    })?;
    let rows: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    for ((_, out), p) in results.iter().zip(&policies) {
        write(out, &common.out.join(p.name()))?;
    }
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    let path = common.out.join("comparison.json");
    fs::write(&path, json).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn trace_dump(path: &Path, kind: Option<&str>, plane: Option<Plane>, node: Option<&str>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("reading {}: {e}", path.display())))?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TraceRecord =
            serde_json::from_str(line).map_err(|e| Failure::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let shown = match &rec {
            TraceRecord::Event { time, seq, src, dst, plane: p, kind: k, size_bits } => {
                if kind.is_some_and(|want| want != k)
                    || plane.is_some_and(|want| *p != Some(want))
                    || node.is_some_and(|want| src.as_str() != want && dst.as_str() != want)
                {
                    continue;
                }
                let p = match p {
                    Some(Plane::Control) => "CP",
                    Some(Plane::Data) => "DP",
                    None => "--",
                };
                format!("{time:>12.6} #{seq:<6} {p} {k:<20} {src} -> {dst} ({size_bits} bit)")
            }
            _ if kind.is_some() || plane.is_some() => continue,
            TraceRecord::State { time, subject, from, to } => {
                if node.is_some() {
                    continue;
                }
                format!("{time:>12.6}         state {subject}: {from} -> {to}")
            }
            TraceRecord::Allocation { time, cell, comm_share, sensing_share, .. } => {
                if node.is_some() {
                    continue;
                }
                format!("{time:>12.6}         alloc {cell}: comm {comm_share:.4} sensing {sensing_share:.4}")
            }
        };
        println!("{shown}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { scenario } => validate(scenario),
        Command::Run { common, policy } => run(common, *policy),
        Command::Compare { common, policies } => compare(common, policies),
        Command::TraceDump { trace, kind, plane, node } => trace_dump(trace, kind.as_deref(), *plane, node.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
